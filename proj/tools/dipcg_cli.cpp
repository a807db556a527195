#include "dipcg/cli.hpp"

int main(int argc, char** argv) { return dipcg::cli_dispatch(argc, argv); }
