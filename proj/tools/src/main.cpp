#include "lmreg_cli/cli.hpp"

int main(int argc, char **argv) { return lmreg::cli::cli_main(argc, argv); }
