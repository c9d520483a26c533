#include <torch/torch.h>

#include "gendistill/cli.hpp"

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  return gendistill::run_cli(argc, argv);
}
