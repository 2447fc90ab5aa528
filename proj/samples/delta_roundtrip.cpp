// Ships a fine-tuned model as a quantized difference and rebuilds it.
#include <cmath>
#include <cstdio>

#include "retina/codec.hpp"
#include "retina/toy.hpp"

using namespace retina;

int main() {
  const ModelArtifact v0 = toy::random_model("demo", 0, std::nullopt, {{"fc.weight", {256, 128}}, {"fc.bias", {256}}}, 7);
  const ModelArtifact v1 = toy::perturbed(v0, 1, 0.05, 8);

  for (int cb : {7, 5, 3}) {
    const auto p = QuantizationParams::with_compression_bits(cb);
    const DeltaPacket dom = diff_packet(v1, v0, p);
    const DeltaPacket whole = whole_model_packet(v1, p);
    const ModelArtifact rebuilt = apply_packet(dom, &v0);

    double worst = 0.0;
    for (std::size_t l = 0; l < v1.layers().size(); ++l)
      for (std::size_t i = 0; i < v1.layers()[l].data().size(); ++i)
        worst = std::fmax(worst, std::fabs(double(rebuilt.layers()[l].data()[i]) - v1.layers()[l].data()[i]));

    std::printf("cb=%d  dom %7zu B  whole %7zu B  max err %.3g (bound %.3g)\n", cb, packet_size(dom), packet_size(whole),
                worst, p.error_bound());
  }
}
