#include "dedpc/cli.hpp"

int main(int argc, char** argv) { return dedpc::cli::dispatch_command(argc, argv); }
