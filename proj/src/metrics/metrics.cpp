#include "mmc/metrics.hpp"

#include <charconv>
#include <fstream>

#include "mmc/errors.hpp"

namespace mmc {

namespace {

void check_tau(double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw std::invalid_argument("tau must lie in (0, 1)");
}

struct Counts {
  std::size_t inter = 0, p = 0, g = 0;
};

Counts count(const BinaryMask& p, const BinaryMask& g) {
  if (!p.same_shape(g)) {
    throw ShapeError("mask shapes differ: " + std::to_string(p.rows) + "x" + std::to_string(p.cols) + " vs " +
                     std::to_string(g.rows) + "x" + std::to_string(g.cols));
  }
  Counts c;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p.data[i] != 0, b = g.data[i] != 0;
    c.inter += a && b;
    c.p += a;
    c.g += b;
  }
  return c;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

BinaryMask binarize(const ImagePlane& soft, double tau) {
  check_tau(tau);
  BinaryMask m(soft.rows, soft.cols);
  for (std::size_t i = 0; i < soft.size(); ++i) m.data[i] = soft.data[i] >= tau ? 1 : 0;
  return m;
}

std::vector<BinaryMask> binarize(const Tensor& soft, double tau) {
  check_tau(tau);
  if (soft.rank() != 4 || soft.dim(1) != 1) throw ShapeError("binarize expects [N,1,H,W], got " + shape_str(soft.shape()));
  const int n = soft.dim(0), h = soft.dim(2), w = soft.dim(3);
  const auto v = soft.data();
  std::vector<BinaryMask> out;
  for (int k = 0; k < n; ++k) {
    BinaryMask m(h, w);
    const std::size_t off = static_cast<std::size_t>(k) * h * w;
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = v[off + i] >= tau ? 1 : 0;
    out.push_back(std::move(m));
  }
  return out;
}

double iou(const BinaryMask& p, const BinaryMask& g) {
  const Counts c = count(p, g);
  const std::size_t uni = c.p + c.g - c.inter;
  return uni == 0 ? 1.0 : static_cast<double>(c.inter) / static_cast<double>(uni);
}

double dice(const BinaryMask& p, const BinaryMask& g) {
  const Counts c = count(p, g);
  return c.p + c.g == 0 ? 1.0 : 2.0 * static_cast<double>(c.inter) / static_cast<double>(c.p + c.g);
}

void aggregate(MetricsReport& report) {
  double d = 0, j = 0;
  for (const auto& r : report.rows) {
    d += r.dice;
    j += r.iou;
  }
  const double n = report.rows.empty() ? 1.0 : static_cast<double>(report.rows.size());
  report.mean_dice = d / n;
  report.mean_iou = j / n;
}

MetricsReport evaluate_with(const LogitFn& logits_of, const std::vector<SamplePair>& split, double tau,
                            int batch_size) {
  check_tau(tau);
  if (split.empty()) throw DataError("cannot evaluate an empty split");
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  NoGradGuard no_grad;
  MetricsReport report;
  double loss = 0;
  for (std::size_t start = 0; start < split.size(); start += batch_size) {
    std::vector<const SamplePair*> batch;
    for (std::size_t i = start; i < std::min(split.size(), start + batch_size); ++i) batch.push_back(&split[i]);
    const Tensor images = image_batch(batch);
    const Tensor logits = logits_of(images, batch);
    const Tensor targets = mask_batch(batch, MaskSource::clean);
    loss += bce_with_logits(logits, targets).item() * static_cast<double>(batch.size());
    const auto pred = binarize(sigmoid(logits), tau);
    for (std::size_t k = 0; k < batch.size(); ++k) {
      const Counts c = count(pred[k], batch[k]->clean_mask);
      report.rows.push_back({batch[k]->id, dice(pred[k], batch[k]->clean_mask), iou(pred[k], batch[k]->clean_mask),
                             c.p, c.g});
    }
  }
  report.mean_loss = loss / static_cast<double>(split.size());
  aggregate(report);
  return report;
}

MetricsReport evaluate(const SegParams& w, const std::vector<SamplePair>& split, double tau, int batch_size) {
  return evaluate_with([&](const Tensor& images, auto) { return seg_forward(w, images).logits; }, split, tau,
                       batch_size);
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsReport>& reports) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# dice and iou per image; MEAN rows are unweighted means over images\n";
  out << "method,noise,proportion,seed,split,image_id,dice,iou,p_pixels,g_pixels\n";
  for (const auto& rep : reports) {
    const auto prefix = [&] {
      out << rep.method << ',' << rep.noise << ',' << format_double(rep.proportion) << ',' << rep.seed << ',' << rep.split << ',';
    };
    std::size_t p = 0, g = 0;
    for (const auto& r : rep.rows) {
      prefix();
      out << r.image_id << ',' << format_double(r.dice) << ',' << format_double(r.iou) << ',' << r.p_pixels << ',' << r.g_pixels << '\n';
      p += r.p_pixels;
      g += r.g_pixels;
    }
    prefix();
    out << "MEAN," << format_double(rep.mean_dice) << ',' << format_double(rep.mean_iou) << ',' << p << ',' << g << '\n';
  }
  if (!out) throw DataError("write failed: " + path.string());
}

}  // namespace mmc
