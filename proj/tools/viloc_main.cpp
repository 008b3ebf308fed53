#include "viloc/cli.hpp"

int main(int argc, char** argv) { return viloc::cli::run(argc, argv); }
