#include "usar/cli.hpp"

int main(int argc, char** argv) { return usar::cli::dispatch(argc, argv); }
