#include "fgn/cli.hpp"

int main(int argc, char** argv) { return fgn::cli::run_cli(argc, argv); }
