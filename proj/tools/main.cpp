#include <lumenseg/cli.hpp>

int main(int argc, char** argv) { return lumenseg::cli::cli_dispatch(argc, argv); }
