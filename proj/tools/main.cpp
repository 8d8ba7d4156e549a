#include "cli.hpp"

int main(int argc, char** argv) { return gsocc::cli::run(argc, argv); }
