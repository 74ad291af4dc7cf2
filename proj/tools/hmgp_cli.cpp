#include "hmgp/cli.hpp"

int main(int argc, char **argv) { return hmgp::run_cli(argc, argv); }
