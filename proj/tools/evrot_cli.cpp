#include "evrot/cli.hpp"

int main(int argc, char** argv) { return evrot::cli::run_cli(argc, argv); }
