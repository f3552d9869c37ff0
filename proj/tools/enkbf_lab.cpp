#include <string>
#include <vector>

#include "enkbf/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return enkbf::cli::cli_main(args);
}
