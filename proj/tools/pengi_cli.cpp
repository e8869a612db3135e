#include "pengi/cli/commands.hpp"

int main(int argc, char** argv) { return pengi::cli::run_cli(argc, argv); }
