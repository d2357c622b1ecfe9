#include <iostream>

#include <CLI11.hpp>

#include "cgs/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Writes synthetic scenes in the scene directory layout", "cgs-synth"};
  app.require_subcommand(1);
  std::string out;
  cgs::SyntheticOptions s;
  cgs::BlobOptions b;

  auto* stat = app.add_subcommand("static", "random Gaussians seen from a sphere of cameras");
  stat->add_option("--out", out, "scene directory")->required();
  stat->add_option("--gaussians", s.gaussians);
  stat->add_option("--views", s.views);
  stat->add_option("--holdout-every", s.holdout_every);
  stat->add_option("--width", s.width);
  stat->add_option("--height", s.height);
  stat->add_option("--seed", s.seed);

  auto* blob = app.add_subcommand("blob", "static background with a translating blob");
  blob->add_option("--out", out, "sequence directory")->required();
  blob->add_option("--frames", b.frames);
  blob->add_option("--views", b.views);
  blob->add_option("--width", b.width);
  blob->add_option("--height", b.height);
  blob->add_option("--seed", b.seed);

  CLI11_PARSE(app, argc, argv);
  try {
    cgs::save_scene(out, stat->parsed() ? cgs::synthetic_scene(s) : cgs::moving_blob_sequence(b));
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
