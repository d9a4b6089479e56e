#include "normlab/cli.hpp"

int main(int argc, char** argv) { return normlab::cli_dispatch(argc, argv); }
