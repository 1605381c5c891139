#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>

#include "magnifier/config.hpp"
#include "magnifier/data.hpp"
#include "magnifier/errors.hpp"
#include "magnifier/evalkit.hpp"
#include "magnifier/losses.hpp"
#include "magnifier/sab.hpp"
#include "magnifier/train.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace magnifier;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

template <typename T, typename A>
Tensor<T> to_tensor(const A& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<T>(shape, std::vector<T>(a.data(), a.data() + a.size()));
}

template <typename T>
py::array_t<T> to_array(const Tensor<T>& t) {
  py::array_t<T> out(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::memcpy(out.mutable_data(), t.data().data(), t.size() * sizeof(T));
  return out;
}

py::dict loss_dict(const losses::LossReport& r) {
  py::dict d;
  d["l_cls"] = r.l_cls;
  d["l_tri"] = r.l_tri;
  d["l_sd"] = r.l_sd;
  d["l_mask"] = r.l_mask;
  d["l_total"] = r.l_total;
  return d;
}

py::dict retrieval_dict(const evalkit::RetrievalResult& r) {
  py::dict d;
  d["rank1"] = r.rank1();
  d["map"] = r.map;
  d["cmc"] = r.cmc;
  d["ap"] = r.ap;
  d["valid"] = r.valid;
  d["skipped"] = r.skipped;
  return d;
}

TrainConfig parse_config(const std::string& json_text) {
  return json_text.empty() ? TrainConfig{} : TrainConfig::from_json(json_text);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Part-aware person re-identification on synthetic data";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  m.def(
      "generate_dataset",
      [](const fs::path& out, std::uint64_t seed, std::size_t num_ids, std::size_t imgs_per_id,
         double occlusion_rate) {
        data::DatasetSpec spec;
        spec.seed = seed;
        spec.num_ids = num_ids;
        spec.imgs_per_id = imgs_per_id;
        spec.occlusion_rate = occlusion_rate;
        const auto man = data::generate_dataset(spec, out);
        py::dict d;
        d["train"] = man.train.size();
        d["query"] = man.query.size();
        d["gallery"] = man.gallery.size();
        d["occluded"] = man.occluded.size();
        d["num_train_ids"] = man.num_train_ids;
        return d;
      },
      py::arg("out"), py::arg("seed") = 7, py::arg("num_ids") = 32, py::arg("imgs_per_id") = 16,
      py::arg("occlusion_rate") = 1.0);

  m.def(
      "load_split",
      [](const fs::path& dir, const std::string& split) {
        const auto man = data::load_manifest(dir);
        const auto s = data::load_split(dir, man, split);
        py::dict d;
        d["images"] = to_array(s.images);
        d["masks"] = to_array(s.masks);
        d["identities"] = s.identities;
        d["labels"] = s.labels;
        d["cameras"] = s.cameras;
        return d;
      },
      py::arg("data_dir"), py::arg("split"));

  m.def(
      "config",
      [](const std::string& json_text) { return parse_config(json_text).flatten(); },
      py::arg("json") = "", "Flat dotted-key view of a training config (defaults filled in).");
  m.def(
      "config_hash", [](const std::string& json_text) { return parse_config(json_text).hash(); },
      py::arg("json") = "");

  m.def(
      "train",
      [](const fs::path& data_dir, const fs::path& out_dir, const std::string& config_json,
         std::size_t max_steps, bool evaluate, std::optional<fs::path> resume) {
        auto cfg = parse_config(config_json);
        if (max_steps) cfg.max_steps = max_steps;
        train::TrainOptions opt;
        opt.out_dir = out_dir;
        opt.evaluate = evaluate;
        opt.resume = resume;
        train::TrainResult r;
        {
          py::gil_scoped_release release;
          r = train::train_two_stage(cfg, data_dir, opt);
        }
        py::list steps;
        for (const auto& s : r.steps) {
          auto d = loss_dict(s.loss);
          d["step"] = s.step;
          d["epoch"] = s.epoch;
          d["stage"] = s.stage;
          steps.append(d);
        }
        py::dict d;
        d["steps"] = steps;
        d["global_step"] = r.state.global_step;
        d["finished"] = r.finished;
        d["checkpoint"] = r.last_checkpoint;
        d["dead_parameters"] = r.dead_parameters;
        return d;
      },
      py::arg("data_dir"), py::arg("out_dir"), py::arg("config") = "", py::arg("max_steps") = 0,
      py::arg("evaluate") = true, py::arg("resume") = py::none());

  m.def(
      "evaluate",
      [](const fs::path& ckpt, const fs::path& data_dir, const std::string& split) {
        auto ck = train::load_checkpoint(ckpt);
        const auto man = data::load_manifest(data_dir);
        auto& model = *ck.model;
        const auto g = evalkit::extract_embeddings(
            model, data::load_split(data_dir, man, "gallery"));
        const auto q = evalkit::extract_embeddings(
            model, data::load_split(data_dir, man, split == "occluded" ? "occluded" : "query"));
        auto d = retrieval_dict(evalkit::retrieve(q, g));
        d["components"] = ck.config.components.name();
        d["global_step"] = ck.state.global_step;
        return d;
      },
      py::arg("checkpoint"), py::arg("data_dir"), py::arg("split") = "test");

  m.def(
      "embed",
      [](const fs::path& ckpt, const FloatArray& images) {
        auto ck = train::load_checkpoint(ckpt);
        return to_array(ck.model->embed(to_tensor<float>(images)));
      },
      py::arg("checkpoint"), py::arg("images"),
      "L2-normalized retrieval embeddings [N,D] for images [N,3,H,W].");

  m.def(
      "rank_from_distances",
      [](const Array& dist, const std::vector<std::size_t>& qids,
         const std::vector<std::size_t>& qcams, const std::vector<std::size_t>& gids,
         const std::vector<std::size_t>& gcams, std::size_t max_rank) {
        if (dist.ndim() != 2) throw DimensionError("distances must be [queries, gallery]");
        const auto nq = static_cast<std::size_t>(dist.shape(0));
        const auto ng = static_cast<std::size_t>(dist.shape(1));
        std::vector<std::vector<double>> rows(nq);
        for (std::size_t q = 0; q < nq; ++q) rows[q].assign(dist.data() + q * ng, dist.data() + (q + 1) * ng);
        return retrieval_dict(evalkit::rank_from_distances(rows, qids, qcams, gids, gcams, max_rank));
      },
      py::arg("distances"), py::arg("query_ids"), py::arg("query_cams"), py::arg("gallery_ids"),
      py::arg("gallery_cams"), py::arg("max_rank") = 20);

  m.def(
      "sample_plan",
      [](const std::string& strategy, std::size_t k_hat, std::uint64_t seed) {
        RngStream rng(seed);
        return sab::sample_plan(sab::parse_strategy(strategy), k_hat, rng).kept;
      },
      py::arg("strategy"), py::arg("k_hat"), py::arg("seed"));

  m.def(
      "sd_loss",
      [](const Array& pooled, double epsilon) {
        if (pooled.ndim() != 3) throw DimensionError("pooled must be [regions, batch, channels]");
        const auto k = static_cast<std::size_t>(pooled.shape(0));
        const auto b = static_cast<std::size_t>(pooled.shape(1));
        const auto c = static_cast<std::size_t>(pooled.shape(2));
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (std::size_t r = 0; r < k; ++r)
          vars.push_back(tape.constant(Tensor<double>(
              Shape{b, c}, std::vector<double>(pooled.data() + r * b * c, pooled.data() + (r + 1) * b * c))));
        return losses::sd_loss<double>(vars, epsilon).value().item();
      },
      py::arg("pooled"), py::arg("epsilon") = 1e-8);

  m.def(
      "batch_hard_triplet",
      [](const Array& embeddings, const std::vector<std::size_t>& labels, double margin) {
        Tape<double> tape;
        auto e = tape.constant(to_tensor<double>(embeddings));
        return losses::batch_hard_triplet<double>(e, labels, margin).value().item();
      },
      py::arg("embeddings"), py::arg("labels"), py::arg("margin") = 0.3);
}
