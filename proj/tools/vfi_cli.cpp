#include <iostream>

#include "vfi/cli.hpp"

int main(int argc, char** argv)
{
    return vfi::run_cli(std::vector<std::string>(argv + 1, argv + argc), std::cout, std::cerr);
}
