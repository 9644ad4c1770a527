#include "cfdiff/cli.hpp"

int main(int argc, char** argv) { return cfdiff::cli::run(argc, argv); }
