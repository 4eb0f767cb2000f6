#include "topforge/cli.hpp"

int main(int argc, char** argv) { return topforge::cli::run(argc, argv); }
