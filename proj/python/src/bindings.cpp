#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <fstream>
#include <sstream>

#include "segfetch/checkpoint.hpp"
#include "segfetch/dataset.hpp"
#include "segfetch/features.hpp"
#include "segfetch/labeling.hpp"
#include "segfetch/model.hpp"
#include "segfetch/pipeline.hpp"
#include "segfetch/simulator.hpp"
#include "segfetch/throttle.hpp"
#include "segfetch/trace.hpp"

namespace py = pybind11;
using namespace segfetch;

namespace {

using AccessTuple = std::tuple<std::uint64_t, std::uint64_t, std::uint64_t, std::uint64_t>;

Trace to_trace(const std::vector<AccessTuple>& rows) {
  Trace t;
  t.reserve(rows.size());
  for (const auto& [ordinal, cycle, pc, vaddr] : rows) t.push_back({ordinal, cycle, pc, vaddr});
  return t;
}

std::vector<AccessTuple> from_trace(const Trace& trace) {
  std::vector<AccessTuple> out;
  out.reserve(trace.size());
  for (const auto& a : trace) out.emplace_back(a.ordinal, a.cycle, a.pc, a.vaddr);
  return out;
}

// Accesses at the given block addresses, one cycle apart.
Trace trace_of_blocks(const std::vector<std::uint64_t>& blocks, const AddressConfig& addr) {
  Trace t;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    t.push_back({i, i, 0x400000, blocks[i] << addr.block_offset_bits});
  }
  return t;
}

std::vector<int> bitmap_list(const DeltaBitmap& b) {
  std::vector<int> out(b.size());
  for (std::size_t i = 0; i < b.size(); ++i) out[i] = b.test(i);
  return out;
}

DeltaBitmap bitmap_from(const std::vector<int>& bits) {
  DeltaBitmap b(bits.size());
  for (std::size_t i = 0; i < bits.size(); ++i) b.set(i, bits[i] != 0);
  return b;
}

class PyModel {
 public:
  explicit PyModel(const std::string& path) : ck_(load_checkpoint(path)) {}

  py::dict config() const {
    const ModelConfig& c = ck_.config;
    py::dict d;
    d["d_model"] = c.d_model;
    d["heads"] = c.heads;
    d["layers"] = c.layers;
    d["outputs"] = c.outputs;
    d["history"] = c.history;
    d["features"] = c.features;
    d["vocab"] = c.vocab;
    d["ffn_mult"] = c.ffn_mult;
    d["context"] = context_mode_name(c.context);
    return d;
  }

  std::vector<double> predict(const Matrix& features, const Matrix& context) const {
    ModelInput in;
    in.features = features;
    in.context = context;
    return forward(in, ck_.params, ck_.config);
  }

  std::size_t parameter_count() const { return ck_.params.parameter_count(); }
  std::string checksum() const { return to_hex(ck_.params.checksum()); }

 private:
  Checkpoint ck_;
};

}  // namespace

PYBIND11_MODULE(_segfetch, m) {
  m.doc() = "Segmented-address prefetching laboratory";
  m.attr("__version__") = kVersion;
  py::register_exception<Error>(m, "SegfetchError", PyExc_RuntimeError);

  m.def(
      "segment",
      [](std::uint64_t block, unsigned bits) { return segment_address(block, {bits}, {}).segments; },
      py::arg("block"), py::arg("bits") = 6, "Block address sliced into segments, most significant first.");
  m.def(
      "desegment",
      [](const std::vector<std::uint32_t>& segments, unsigned bits) { return desegment(segments, {bits}, {}); },
      py::arg("segments"), py::arg("bits") = 6);
  m.def("pc_context", &pc_context, py::arg("pc"), py::arg("hash_bits") = 16);
  m.def("page_distance_context", &page_distance_context, py::arg("page_n"), py::arg("page_1"));

  m.def(
      "future_deltas",
      [](const std::vector<std::uint64_t>& blocks, std::size_t t, std::size_t window, std::int64_t bound,
         std::size_t skip) {
        const AddressConfig addr;
        return collect_future_deltas(trace_of_blocks(blocks, addr), t, {window, bound, skip}, addr);
      },
      py::arg("blocks"), py::arg("t"), py::arg("window") = 128, py::arg("bound") = 128, py::arg("skip") = 0,
      "Label deltas of trigger t over a sequence of block addresses.");
  m.def(
      "deltas_to_bitmap",
      [](const DeltaSet& deltas, std::int64_t bound) { return bitmap_list(deltas_to_bitmap(deltas, {1, bound, 0})); },
      py::arg("deltas"), py::arg("bound") = 128);
  m.def(
      "bitmap_to_deltas",
      [](const std::vector<int>& bits, std::int64_t bound) {
        return bitmap_to_deltas(bitmap_from(bits), {1, bound, 0});
      },
      py::arg("bits"), py::arg("bound") = 128);

  m.def(
      "generate_trace",
      [](const std::string& kind, std::size_t length, std::uint64_t seed, std::int64_t stride,
         std::vector<std::int64_t> deltas, std::uint64_t restart_every, std::uint64_t cycles_per_access) {
        PatternSpec spec;
        spec.kind = parse_pattern_kind(kind);
        spec.stride = stride;
        if (!deltas.empty()) spec.deltas = std::move(deltas);
        spec.restart_every = restart_every;
        spec.cycles_per_access = cycles_per_access;
        return from_trace(generate_trace(spec, length, seed));
      },
      py::arg("kind") = "stride", py::arg("length") = 1000, py::arg("seed") = 1, py::arg("stride") = 1,
      py::arg("deltas") = std::vector<std::int64_t>{}, py::arg("restart_every") = 0,
      py::arg("cycles_per_access") = 1, "Synthetic trace as (ordinal, cycle, pc, vaddr) tuples.");
  m.def(
      "read_trace", [](const std::string& path) { return from_trace(read_trace(path)); }, py::arg("path"));
  m.def(
      "write_trace",
      [](const std::string& path, const std::vector<AccessTuple>& trace, bool gzip) {
        write_trace(path, to_trace(trace), gzip);
      },
      py::arg("path"), py::arg("trace"), py::arg("gzip") = false);

  m.def(
      "set_metrics",
      [](const DeltaSet& pred, const DeltaSet& label) {
        const Metrics x = set_metrics(pred, label);
        return std::tuple{x.precision, x.recall, x.f1};
      },
      py::arg("pred"), py::arg("label"), "(precision, recall, f1)");
  m.def(
      "_tune_threshold",
      [](const Matrix& conf, const Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>& labels,
         double grid_step, std::size_t max_degree) {
        if (conf.rows() != labels.rows() || conf.cols() != labels.cols()) {
          throw RangeError("confidences and labels must have the same shape");
        }
        std::vector<ConfidenceVector> c;
        std::vector<DeltaBitmap> l;
        for (Eigen::Index r = 0; r < conf.rows(); ++r) {
          c.emplace_back(conf.row(r).begin(), conf.row(r).end());
          DeltaBitmap b(static_cast<std::size_t>(conf.cols()));
          for (Eigen::Index i = 0; i < conf.cols(); ++i) b.set(static_cast<std::size_t>(i), labels(r, i));
          l.push_back(std::move(b));
        }
        return threshold_report_json(tune_threshold(c, l, {grid_step, max_degree}));
      },
      py::arg("conf"), py::arg("labels"), py::arg("grid_step") = 0.01, py::arg("max_degree") = 0);

  m.def(
      "estimate_latency",
      [](std::size_t d_model, std::size_t layers) {
        ModelConfig cfg;
        cfg.d_model = d_model;
        cfg.layers = layers;
        return estimate_latency(LatencyCosts::log_tree(d_model), cfg);
      },
      py::arg("d_model") = 64, py::arg("layers") = 2, "Cycle estimate with log-tree primitive costs.");

  m.def(
      "_simulate",
      [](const std::vector<AccessTuple>& trace, const std::string& prefetcher, std::size_t degree,
         std::size_t sets, std::size_t ways, std::uint64_t latency, const std::string& throughput) {
        const Trace t = to_trace(trace);
        auto p = make_baseline(prefetcher, degree);
        SimConfig cfg;
        cfg.cache.sets = sets;
        cfg.cache.ways = ways;
        cfg.latency = {latency, parse_throughput(throughput)};
        return sim_report_json(simulate(t, p.get(), cfg, {}));
      },
      py::arg("trace"), py::arg("prefetcher") = "none", py::arg("degree") = 1, py::arg("sets") = 64,
      py::arg("ways") = 16, py::arg("latency") = 0, py::arg("throughput") = "H");

  m.def(
      "_canonical_config", [](const std::string& text) { return config_to_json(config_from_json(text)); },
      py::arg("text"));
  m.def(
      "_config_hash", [](const std::string& text) { return config_hash(config_from_json(text)); },
      py::arg("text"));
  m.def(
      "stages",
      [] {
        std::vector<std::string> out;
        for (Stage s : all_stages()) out.push_back(stage_name(s));
        return out;
      });
  m.def(
      "_run_stage",
      [](const std::string& stage, const std::string& config_text, const std::string& run_dir) {
        const ExperimentConfig cfg = config_from_json(config_text);
        py::gil_scoped_release release;
        run_stage(parse_stage(stage), cfg, run_dir);
      },
      py::arg("stage"), py::arg("config"), py::arg("run_dir"));

  py::class_<PyModel>(m, "Model")
      .def(py::init<const std::string&>(), py::arg("checkpoint"))
      .def_property_readonly("config", &PyModel::config)
      .def_property_readonly("parameter_count", &PyModel::parameter_count)
      .def_property_readonly("checksum", &PyModel::checksum)
      .def("predict", &PyModel::predict, py::arg("features"), py::arg("context"),
           "Confidences for one history: features N x F, context N x 2.");
}
