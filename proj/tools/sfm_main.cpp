#include "cli.hpp"

int main(int argc, char** argv) { return sfm::cli::run_cli(argc, argv); }
