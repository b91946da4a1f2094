#include "cli.hpp"

int main(int argc, char** argv) { return spurgen::cli::run(argc, argv); }
