#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ceit/analyzer.hpp"
#include "ceit/config.hpp"
#include "ceit/gradcheck.hpp"
#include "ceit/model.hpp"
#include "ceit/train.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ceit::Tensor to_tensor(const Array& a) {
    ceit::Shape shape(a.ndim());
    for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[static_cast<std::size_t>(i)] = a.shape(i);
    std::vector<double> data(a.data(), a.data() + a.size());
    return ceit::Tensor::from_data(std::move(shape), std::move(data));
}

Array to_array(const ceit::Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    Array a(shape);
    std::copy(t.data().begin(), t.data().end(), a.mutable_data());
    return a;
}

ceit::Config resolve(const std::string& preset_or_json) {
    if (ceit::is_preset(preset_or_json)) return ceit::preset(preset_or_json);
    return ceit::config_from_json(preset_or_json);
}

}  // namespace

PYBIND11_MODULE(_ceit, m) {
    m.doc() = "CeiT building blocks: tensor ops, model forward, cost analysis, training";

    m.def("matmul", [](const Array& a, const Array& b) {
        ceit::NoGradGuard g;
        return to_array(ceit::matmul(to_tensor(a), to_tensor(b)));
    });
    m.def("softmax", [](const Array& x, int axis) {
        ceit::NoGradGuard g;
        return to_array(ceit::softmax(to_tensor(x), axis));
    });
    m.def("gelu", [](const Array& x) {
        ceit::NoGradGuard g;
        return to_array(ceit::gelu(to_tensor(x)));
    });
    m.def("layer_norm", [](const Array& x, const Array& gamma, const Array& beta, int axis) {
        ceit::NoGradGuard g;
        return to_array(
            ceit::layer_norm(to_tensor(x), to_tensor(gamma), to_tensor(beta), axis, 1e-5));
    });
    m.def(
        "conv2d",
        [](const Array& x, const Array& w, const Array& bias, std::int64_t stride,
           std::int64_t padding, std::int64_t groups) {
            ceit::NoGradGuard g;
            return to_array(ceit::conv2d(to_tensor(x), to_tensor(w), to_tensor(bias), stride,
                                         padding, groups));
        },
        py::arg("x"), py::arg("w"), py::arg("bias"), py::arg("stride") = 1, py::arg("padding") = 0,
        py::arg("groups") = 1);
    m.def("max_pool2d", [](const Array& x, std::int64_t kernel, std::int64_t stride,
                           std::int64_t padding) {
        ceit::NoGradGuard g;
        return to_array(ceit::max_pool2d(to_tensor(x), kernel, stride, padding));
    });

    m.def("preset_names", &ceit::preset_names);
    m.def("config_json", [](const std::string& preset_or_json) {
        return ceit::config_to_json(resolve(preset_or_json));
    });

    m.def(
        "analyze",
        [](const std::string& preset_or_json, std::int64_t resolution) {
            const ceit::Config cfg = resolve(preset_or_json);
            return ceit::count_flops(cfg.model,
                                     resolution > 0 ? resolution : cfg.model.image_size)
                .to_json();
        },
        py::arg("config"), py::arg("resolution") = 0);

    m.def(
        "gradcheck",
        [](const std::string& preset_or_json, std::uint64_t seed) {
            const ceit::GradCheckReport r =
                ceit::gradcheck_model(resolve(preset_or_json).model, seed);
            return py::make_tuple(r.passed, r.worst, r.to_table());
        },
        py::arg("config"), py::arg("seed") = 7);

    m.def(
        "synth_dataset",
        [](std::int64_t num_classes, std::int64_t samples, std::int64_t image_size,
           std::int64_t channels, std::uint64_t seed, double noise) {
            const ceit::Dataset ds =
                ceit::synth_dataset(num_classes, samples, image_size, channels, seed, noise);
            return py::make_tuple(to_array(ds.images), ds.labels);
        },
        py::arg("num_classes"), py::arg("samples"), py::arg("image_size"), py::arg("channels") = 3,
        py::arg("seed") = 42, py::arg("noise") = 0.0);

    py::class_<ceit::Model>(m, "Model")
        .def(py::init([](const std::string& preset_or_json, std::uint64_t seed) {
                 return new ceit::Model(resolve(preset_or_json).model, seed);
             }),
             py::arg("config"), py::arg("seed") = 42)
        .def("num_params", &ceit::Model::num_param_scalars)
        .def("num_state", &ceit::Model::num_state_scalars)
        .def("param_names",
             [](const ceit::Model& self) {
                 std::vector<std::string> names;
                 for (const auto& [name, t] : self.params()) names.push_back(name);
                 return names;
             })
        .def(
            "forward",
            [](const ceit::Model& self, const Array& images, bool training) {
                ceit::NoGradGuard g;
                ceit::ForwardOptions opts;
                opts.training = training;
                opts.update_bn_stats = false;
                return to_array(self.forward(to_tensor(images), opts).logits);
            },
            py::arg("images"), py::arg("training") = false);

    m.def(
        "train_demo",
        [](const std::string& preset_or_json, std::int64_t steps, std::uint64_t seed) {
            ceit::Config cfg = resolve(preset_or_json);
            cfg.train.seed = seed;
            const ceit::Dataset ds =
                ceit::synth_dataset(cfg.train.dataset.num_classes, cfg.train.dataset.samples,
                                    cfg.model.image_size, cfg.model.in_channels, seed,
                                    cfg.train.dataset.noise);
            ceit::Model model(cfg.model, seed);
            ceit::AdamW opt(cfg.train.weight_decay);
            const auto history = ceit::train_steps(model, opt, ds, cfg.train, 0, steps);
            std::vector<py::tuple> out;
            for (const auto& h : history) {
                out.push_back(py::make_tuple(h.step, h.lr, h.loss, h.accuracy));
            }
            return out;
        },
        py::arg("config"), py::arg("steps"), py::arg("seed") = 42);
}
