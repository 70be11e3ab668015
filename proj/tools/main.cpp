#include "upc/cli.hpp"

int main(int argc, char** argv) { return upc::cli::run_cli(argc, argv); }
