// SPDX-License-Identifier: Apache-2.0
//
// Regenerates the bundled raw corpora.

#include <iostream>

#include <CLI11.hpp>

#include "cdistill/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Write the synthetic raw corpora and their manifest"};
  std::string out = "data/raw";
  cdistill::SyntheticOptions options;
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--seed", options.seed, "Generator seed")->capture_default_str();
  app.add_option("--train", options.train_size, "Binary-labelled training rows per dataset")->capture_default_str();
  app.add_option("--validation", options.validation_size, "Binary-labelled validation rows per dataset")
      ->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  cdistill::write_synthetic_corpus(out, options);
  std::cout << "wrote " << out << '\n';
  return 0;
}
