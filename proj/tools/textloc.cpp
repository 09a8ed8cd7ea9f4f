#include "cli.hpp"

int main(int argc, char** argv) { return textloc::cli::run(argc, argv); }
