#include "tbattr/cli.hpp"

int main(int argc, char** argv) { return tbattr::dispatch(argc, argv); }
