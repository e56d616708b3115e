#include "clipn/cli.hpp"

int main(int argc, char** argv) { return clipn::cli::run(argc, argv); }
