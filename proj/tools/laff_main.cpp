#include "laff/cli.hpp"

int main(int argc, char** argv) { return laff::cli::run(argc, argv); }
