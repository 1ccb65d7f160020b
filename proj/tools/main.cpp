#include "imr/cli.hpp"

int main(int argc, char** argv) { return imr::cli::run(argc, argv); }
