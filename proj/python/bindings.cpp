#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "latentlab/harness.hpp"
#include "latentlab/loss.hpp"
#include "latentlab/train.hpp"
#include "latentlab/version.hpp"

namespace py = pybind11;
using namespace latentlab;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

Shape shape_of(const py::buffer_info& info) {
    Shape s;
    for (auto d : info.shape) s.push_back(static_cast<std::size_t>(d));
    return s;
}

Tensor to_tensor(const F32& a) {
    const auto info = a.request();
    const auto* p = static_cast<const float*>(info.ptr);
    return Tensor(shape_of(info), std::vector<float>(p, p + info.size));
}

Tensor64 to_tensor64(const F64& a) {
    const auto info = a.request();
    const auto* p = static_cast<const double*>(info.ptr);
    return Tensor64(shape_of(info), std::vector<double>(p, p + info.size));
}

template <class T>
py::array_t<T> to_numpy(const BasicTensor<T>& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    py::array_t<T> out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

/// Image input: a single [C,H,W] image gains a batch axis.
Tensor image_tensor(const F32& a) {
    Tensor t = to_tensor(a);
    if (t.rank() == 3) t = reshape(t, {1, t.dim(0), t.dim(1), t.dim(2)});
    return t;
}

InputShape input_shape(const std::tuple<std::size_t, std::size_t, std::size_t>& s) {
    return {std::get<0>(s), std::get<1>(s), std::get<2>(s)};
}

py::dict trace_dict(const AttackTrace& t) {
    py::dict d;
    d["final"] = to_numpy(t.final);
    d["predicted"] = t.predicted;
    d["first_success"] = t.first_success ? py::cast(*t.first_success) : py::none();
    d["gradient_passes"] = t.gradient_passes;
    d["check_passes"] = t.check_passes;
    d["margins"] = t.margins;
    d["losses"] = t.losses;
    d["betas"] = t.betas;
    py::list its;
    for (const auto& x : t.iterates) its.append(to_numpy(x));
    d["iterates"] = its;
    return d;
}

Dataset make_dataset(const F32& images, std::vector<std::size_t> labels, std::size_t num_classes) {
    Dataset d;
    d.images = image_tensor(images);
    d.labels = std::move(labels);
    d.num_classes = num_classes;
    d.validate();
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Latent-feature adversarial attacks on small residual networks";
    m.attr("__version__") = kVersion;

    // Errors: one Python class per C++ error kind, all deriving from Error.
    // Translators run newest first, so the subclasses win over the base.
    const auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
#define LATENTLAB_PY_ERROR(Name) py::register_exception<Name>(m, #Name, base.ptr());
    LATENTLAB_PY_ERROR(ShapeMismatch)
    LATENTLAB_PY_ERROR(NonFiniteResult)
    LATENTLAB_PY_ERROR(NotScalarLoss)
    LATENTLAB_PY_ERROR(DetachedTape)
    LATENTLAB_PY_ERROR(CorruptFile)
    LATENTLAB_PY_ERROR(VersionMismatch)
    LATENTLAB_PY_ERROR(ChecksumMismatch)
    LATENTLAB_PY_ERROR(InvalidArchitecture)
    LATENTLAB_PY_ERROR(NotOneHot)
    LATENTLAB_PY_ERROR(DegenerateMargin)
    LATENTLAB_PY_ERROR(TargetIsTruth)
    LATENTLAB_PY_ERROR(MissingHead)
    LATENTLAB_PY_ERROR(InvalidWeights)
    LATENTLAB_PY_ERROR(InvalidConfig)
    LATENTLAB_PY_ERROR(EmptyDataset)
    LATENTLAB_PY_ERROR(NoIntermediateLayers)
    LATENTLAB_PY_ERROR(BadMagic)
    LATENTLAB_PY_ERROR(DimensionMismatch)
    LATENTLAB_PY_ERROR(TruncatedFile)
    LATENTLAB_PY_ERROR(IoError)
#undef LATENTLAB_PY_ERROR

    // nn ----------------------------------------------------------------------
    py::class_<LogitsHead>(m, "LogitsHead")
        .def_readonly("layer", &LogitsHead::layer)
        .def_property_readonly("weight", [](const LogitsHead& h) { return to_numpy(h.weight); })
        .def_property_readonly("bias", [](const LogitsHead& h) { return to_numpy(h.bias); });

    py::class_<ModelGraph>(m, "Model")
        .def_property_readonly("depth", &ModelGraph::depth)
        .def_property_readonly("num_classes", &ModelGraph::num_classes)
        .def_property_readonly("input_shape",
                               [](const ModelGraph& g) {
                                   const auto& s = g.input_shape();
                                   return py::make_tuple(s.channels, s.height, s.width);
                               })
        .def_property_readonly("parameter_count", &ModelGraph::parameter_count)
        .def("checksum", [](const ModelGraph& g) { return parameter_checksum(g); })
        .def("logits", [](const ModelGraph& g, const F32& x) { return to_numpy(logits(g, image_tensor(x))); })
        .def("forward_with_taps",
             [](const ModelGraph& g, const F32& x) {
                 const ForwardTaps f = forward_with_taps(g, image_tensor(x));
                 py::list taps;
                 for (const auto& t : f.taps) taps.append(to_numpy(t));
                 return py::make_tuple(to_numpy(f.logits), taps);
             })
        .def("predict", [](const ModelGraph& g, const F32& x) { return argmax_rows(logits(g, image_tensor(x))); })
        .def("clone", &ModelGraph::clone);

    m.def(
        "build_resnet_small",
        [](std::size_t blocks, std::vector<std::size_t> widths, std::size_t classes,
           std::tuple<std::size_t, std::size_t, std::size_t> input, std::uint64_t seed, bool affine) {
            return build_resnet_small(blocks, widths, classes, input_shape(input), seed, affine);
        },
        py::arg("blocks"), py::arg("widths"), py::arg("classes"), py::arg("input_shape"), py::arg("seed") = 0,
        py::arg("affine") = false);
    m.def("make_heads", &make_heads);
    m.def("head_checksum", &head_checksum);
    m.def("save_weights", &save_weights, py::arg("path"), py::arg("model"), py::arg("heads") = HeadSet{});
    m.def("load_weights", [](const std::filesystem::path& p) {
        ModelBundle b = load_weights(p);
        return py::make_tuple(std::move(b.model), std::move(b.heads));
    });

    // loss (64-bit, rows of logits) ---------------------------------------------
    auto labels_arg = [](const std::vector<std::size_t>& y) { return std::span<const std::size_t>(y); };
    m.def("sce", [=](const F64& z, const std::vector<std::size_t>& y) { return to_numpy(sce(to_tensor64(z), labels_arg(y))); });
    m.def("dl_margin",
          [=](const F64& z, const std::vector<std::size_t>& y) { return to_numpy(dl_margin(to_tensor64(z), labels_arg(y))); });
    m.def(
        "surrogate",
        [=](const F64& z, const std::vector<std::size_t>& y, double t) {
            return to_numpy(surrogate(to_tensor64(z), labels_arg(y), t));
        },
        py::arg("z"), py::arg("labels"), py::arg("temperature") = 1.0);
    m.def(
        "surrogate_targeted",
        [=](const F64& z, const std::vector<std::size_t>& y, std::size_t target, double t) {
            const std::vector<std::size_t> targets(y.size(), target);
            return to_numpy(surrogate_targeted(to_tensor64(z), labels_arg(y), labels_arg(targets), t));
        },
        py::arg("z"), py::arg("labels"), py::arg("target"), py::arg("temperature") = 1.0);

    // attack ----------------------------------------------------------------------
    py::class_<Tactics>(m, "Tactics")
        .def(py::init<>())
        .def_readwrite("latent", &Tactics::latent)
        .def_readwrite("surrogate", &Tactics::surrogate)
        .def_readwrite("schedule", &Tactics::schedule)
        .def_readwrite("multi_target", &Tactics::multi_target)
        .def_property_readonly("mask", &Tactics::mask)
        .def_property_readonly("label", &Tactics::label)
        .def_static("from_mask", &Tactics::from_mask);

    py::enum_<MarginGradient>(m, "MarginGradient")
        .value("THROUGH", MarginGradient::Through)
        .value("DETACHED", MarginGradient::Detached);

    py::class_<AttackConfig>(m, "AttackConfig")
        .def(py::init<>())
        .def_readwrite("eps", &AttackConfig::eps)
        .def_readwrite("iters", &AttackConfig::iters)
        .def_readwrite("nu", &AttackConfig::nu)
        .def_readwrite("temperature", &AttackConfig::temperature)
        .def_readwrite("beta_grid", &AttackConfig::beta_grid)
        .def_readwrite("layer", &AttackConfig::layer)
        .def_readwrite("tactics", &AttackConfig::tactics)
        .def_readwrite("random_start", &AttackConfig::random_start)
        .def_readwrite("seed", &AttackConfig::seed)
        .def_readwrite("alpha0", &AttackConfig::alpha0)
        .def_readwrite("mim_decay", &AttackConfig::mim_decay)
        .def_readwrite("margin", &AttackConfig::margin)
        .def_readwrite("literal_mu0", &AttackConfig::literal_mu0)
        .def_readwrite("stop_on_success", &AttackConfig::stop_on_success)
        .def_readwrite("record_iterates", &AttackConfig::record_iterates)
        .def("validate", &AttackConfig::validate)
        .def_static("middle_out_betas", &AttackConfig::middle_out_betas);

    m.def("project", [](const F32& x, const F32& v, double eps) { return to_numpy(project(to_tensor(x), to_tensor(v), eps)); });
    m.def("step_size", &step_size);
    m.def("worst_case_passes", &worst_case_passes);
    m.def("images_forwarded", &images_forwarded);
    m.def(
        "pgd",
        [](const ModelGraph& g, const F32& x, std::size_t y, const AttackConfig& c, std::uint64_t index) {
            return trace_dict(pgd(g, image_tensor(x), y, c, index));
        },
        py::arg("model"), py::arg("x"), py::arg("label"), py::arg("config"), py::arg("image_index") = 0);
    m.def("fgsm", [](const ModelGraph& g, const F32& x, std::size_t y, const AttackConfig& c) {
        return trace_dict(fgsm(g, image_tensor(x), y, c));
    });
    m.def("bim", [](const ModelGraph& g, const F32& x, std::size_t y, const AttackConfig& c) {
        return trace_dict(bim(g, image_tensor(x), y, c));
    });
    m.def("mim", [](const ModelGraph& g, const F32& x, std::size_t y, const AttackConfig& c) {
        return trace_dict(mim(g, image_tensor(x), y, c));
    });
    m.def(
        "lafeat_attack",
        [](const ModelGraph& g, const HeadSet& heads, const F32& x, std::size_t y, const AttackConfig& c, double beta,
           std::optional<std::size_t> target, std::uint64_t index) {
            return trace_dict(lafeat_attack(g, find_head(heads, c.layer), image_tensor(x), y, c, beta, target, index));
        },
        py::arg("model"), py::arg("heads"), py::arg("x"), py::arg("label"), py::arg("config"), py::arg("beta"),
        py::arg("target") = py::none(), py::arg("image_index") = 0);
    m.def(
        "attack_image",
        [](const ModelGraph& g, const HeadSet& heads, const F32& x, std::size_t y, const AttackConfig& c,
           std::uint64_t index) {
            const AttackOutcome o = attack_image(g, heads, image_tensor(x), y, c, index);
            py::dict d;
            d["success"] = o.success;
            d["adversarial"] = to_numpy(o.adversarial);
            d["predicted"] = o.predicted;
            d["gradient_passes"] = o.gradient_passes;
            d["check_passes"] = o.check_passes;
            d["runs"] = o.runs;
            d["first_success"] = o.first_success ? py::cast(*o.first_success) : py::none();
            d["beta"] = o.beta ? py::cast(*o.beta) : py::none();
            d["target"] = o.target ? py::cast(*o.target) : py::none();
            return d;
        },
        py::arg("model"), py::arg("heads"), py::arg("x"), py::arg("label"), py::arg("config"), py::arg("image_index") = 0);

    // data --------------------------------------------------------------------------
    py::class_<Dataset>(m, "Dataset")
        .def(py::init(&make_dataset), py::arg("images"), py::arg("labels"), py::arg("num_classes"))
        .def_property_readonly("images", [](const Dataset& d) { return to_numpy(d.images); })
        .def_readonly("labels", &Dataset::labels)
        .def_readonly("num_classes", &Dataset::num_classes)
        .def_readwrite("split", &Dataset::split)
        .def("__len__", &Dataset::size)
        .def("slice", &Dataset::slice);

    m.def(
        "synth_dataset",
        [](const std::string& kind, std::size_t count, std::size_t classes,
           std::tuple<std::size_t, std::size_t, std::size_t> input, std::uint64_t seed) {
            return synth_dataset(parse_synth_kind(kind), count, classes, input_shape(input), seed);
        },
        py::arg("kind"), py::arg("count"), py::arg("classes"), py::arg("input_shape"), py::arg("seed") = 0);
    m.def("load_idx", &load_idx, py::arg("images"), py::arg("labels"), py::arg("num_classes") = 0);
    m.def("evaluate", &evaluate);
    m.def("predict", &predict);

    // train ---------------------------------------------------------------------------
    py::class_<AdversarialSettings>(m, "AdversarialSettings")
        .def(py::init<>())
        .def_readwrite("eps", &AdversarialSettings::eps)
        .def_readwrite("steps", &AdversarialSettings::steps)
        .def_readwrite("step", &AdversarialSettings::step)
        .def_readwrite("random_start", &AdversarialSettings::random_start);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate)
        .def_readwrite("decay_epochs", &TrainConfig::decay_epochs)
        .def_readwrite("decay_factor", &TrainConfig::decay_factor)
        .def_readwrite("momentum", &TrainConfig::momentum)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("adversarial", &TrainConfig::adversarial)
        .def_readwrite("latent_heads_on", &TrainConfig::latent_heads_on)
        .def_readwrite("head_loss_weights", &TrainConfig::head_loss_weights)
        .def_readwrite("max_epochs", &TrainConfig::max_epochs)
        .def_readwrite("tolerance", &TrainConfig::tolerance)
        .def_readwrite("patience", &TrainConfig::patience);

    py::class_<TrainStats>(m, "TrainStats")
        .def_readonly("initial_loss", &TrainStats::initial_loss)
        .def_readonly("epoch_loss", &TrainStats::epoch_loss);

    // Training mutates the model in place, as in C++.
    m.def("train_natural", &train_natural);
    m.def(
        "train_adversarial",
        [](ModelGraph& g, const Dataset& d, const TrainConfig& c) {
            HeadSet heads;
            TrainStats s = train_adversarial(g, heads, d, c);
            return py::make_tuple(s, heads);
        },
        "Returns (stats, heads); heads are empty unless latent_heads_on.");
    m.def("train_heads", [](const ModelGraph& g, const Dataset& d, const TrainConfig& c) { return train_heads(g, d, c); });

    py::class_<LayerScore>(m, "LayerScore")
        .def_readonly("layer", &LayerScore::layer)
        .def_readonly("accuracy", &LayerScore::accuracy)
        .def_readonly("successes", &LayerScore::successes)
        .def_readonly("mean_first_success", &LayerScore::mean_first_success);
    py::class_<LayerSelectionReport>(m, "LayerSelectionReport")
        .def_readonly("layers", &LayerSelectionReport::layers)
        .def_readonly("selected", &LayerSelectionReport::selected)
        .def_readonly("clean_accuracy", &LayerSelectionReport::clean_accuracy);
    m.def("select_layer", &select_layer);

    // harness -------------------------------------------------------------------------
    auto spec = [](const std::string& name, const std::string& kind, const AttackConfig& c) {
        return AttackSpec{name, parse_attack_kind(kind), c};
    };
    m.def(
        "run_benchmark",
        [=](const ModelGraph& g, const HeadSet& heads, const Dataset& d,
            const std::vector<std::tuple<std::string, std::string, AttackConfig>>& attacks, const std::string& reference) {
            std::vector<AttackSpec> specs;
            for (const auto& [name, kind, c] : attacks) specs.push_back(spec(name, kind, c));
            return report_table(run_benchmark(g, heads, d, specs, reference)).str();
        },
        py::arg("model"), py::arg("heads"), py::arg("data"), py::arg("attacks"), py::arg("reference") = "pgd",
        "attacks: list of (name, kind, AttackConfig); returns the report as CSV text.");
    m.def(
        "convergence_curves",
        [=](const ModelGraph& g, const HeadSet& heads, const Dataset& d,
            const std::vector<std::tuple<std::string, std::string, AttackConfig>>& methods, std::size_t max_iters) {
            std::vector<AttackSpec> specs;
            for (const auto& [name, kind, c] : methods) specs.push_back(spec(name, kind, c));
            const CurveSet curves = convergence_curves(g, heads, d, specs, max_iters);
            py::dict out;
            for (std::size_t i = 0; i < curves.methods.size(); ++i) out[py::str(curves.methods[i])] = curves.survival[i];
            return out;
        });
    m.def("beta_sweep", [](const ModelGraph& g, const HeadSet& heads, const Dataset& d, const std::vector<double>& betas,
                           const AttackConfig& c) {
        std::vector<std::pair<double, double>> rows;
        for (const auto& r : beta_sweep(g, heads, d, betas, c)) rows.emplace_back(r.beta, r.accuracy);
        return rows;
    });
    m.def("ablation_lattice", [](const ModelGraph& g, const HeadSet& heads, const Dataset& d, const AttackConfig& c) {
        const LatticeReport r = ablation_lattice(g, heads, d, c);
        return py::make_tuple(lattice_table(r).str(), lattice_edge_table(r).str());
    }, "Returns (rows_csv, edges_csv).");
    m.def("activation_dump", [](const ModelGraph& g, const F32& natural, const F32& adversarial, std::size_t top_k) {
        return activation_table(activation_dump(g, image_tensor(natural), image_tensor(adversarial), top_k)).str();
    });
}
