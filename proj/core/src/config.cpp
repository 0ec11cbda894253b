#include "mmdg/config.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "mmdg/format.hpp"

namespace mmdg {

namespace {

std::size_t to_size(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t.empty() || !std::all_of(t.begin(), t.end(), ::isdigit)) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return static_cast<std::size_t>(std::stoull(t));
}

double to_real(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  const std::string t = trim(v);
  if (t == "true" || t == "1" || t == "on") return true;
  if (t == "false" || t == "0" || t == "off") return false;
  throw ConfigError(key + ": expected true/false, got '" + v + "'");
}

std::vector<std::string> items(const std::string& v) {
  std::vector<std::string> out;
  for (const std::string& part : split(v, ',')) {
    const std::string t = trim(part);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::vector<std::size_t> to_sizes(const std::string& key, const std::string& v) {
  std::vector<std::size_t> out;
  for (const std::string& s : items(v)) out.push_back(to_size(key, s));
  return out;
}

std::vector<double> to_reals(const std::string& key, const std::string& v) {
  std::vector<double> out;
  for (const std::string& s : items(v)) out.push_back(to_real(key, s));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(v[i]);
    } else {
      out += std::to_string(v[i]);
    }
  }
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string& key, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

using FieldTable = std::vector<std::pair<std::string, Field>>;

const FieldTable& fields() {
  static const FieldTable table = [] {
    FieldTable t;
    auto add = [&](std::string key, Field f) { t.emplace_back(std::move(key), std::move(f)); };
    auto str = [](const std::string& v) { return trim(v); };
    auto b = [](bool v) { return std::string(v ? "true" : "false"); };

    add("experiment.name", {[=](auto& c, auto&, auto& v) { c.name = str(v); },
                            [](auto& c) { return c.name; }});
    add("experiment.method", {[=](auto& c, auto&, auto& v) { c.method = parse_method(str(v)); },
                              [](auto& c) { return to_string(c.method); }});
    add("experiment.protocol",
        {[=](auto& c, auto&, auto& v) {
           try {
             c.protocol = parse_protocol(str(v));
           } catch (const DataError& e) {
             throw ConfigError(e.what());
           }
         },
         [](auto& c) { return to_string(c.protocol); }});
    add("experiment.domain", {[](auto& c, auto&, auto& v) { c.domain = parse_domain(v); },
                              [](auto& c) { return "D" + std::to_string(c.domain + 1); }});
    add("experiment.seeds",
        {[](auto& c, auto& k, auto& v) {
           c.seeds.clear();
           for (std::size_t s : to_sizes(k, v)) c.seeds.push_back(s);
         },
         [](auto& c) { return join(c.seeds); }});
    add("experiment.output_dir", {[=](auto& c, auto&, auto& v) { c.output_dir = str(v); },
                                  [](auto& c) { return c.output_dir; }});

    add("data.modalities", {[](auto& c, auto& k, auto& v) { c.data.modalities = to_size(k, v); },
                            [](auto& c) { return std::to_string(c.data.modalities); }});
    add("data.num_domains", {[](auto& c, auto& k, auto& v) { c.data.num_domains = to_size(k, v); },
                             [](auto& c) { return std::to_string(c.data.num_domains); }});
    add("data.num_classes", {[](auto& c, auto& k, auto& v) { c.data.num_classes = to_size(k, v); },
                             [](auto& c) { return std::to_string(c.data.num_classes); }});
    add("data.latent_dim", {[](auto& c, auto& k, auto& v) { c.data.latent_dim = to_size(k, v); },
                            [](auto& c) { return std::to_string(c.data.latent_dim); }});
    add("data.train_per_domain",
        {[](auto& c, auto& k, auto& v) { c.data.train_per_domain = to_size(k, v); },
         [](auto& c) { return std::to_string(c.data.train_per_domain); }});
    add("data.val_per_domain",
        {[](auto& c, auto& k, auto& v) { c.data.val_per_domain = to_size(k, v); },
         [](auto& c) { return std::to_string(c.data.val_per_domain); }});
    add("data.test_per_domain",
        {[](auto& c, auto& k, auto& v) { c.data.test_per_domain = to_size(k, v); },
         [](auto& c) { return std::to_string(c.data.test_per_domain); }});
    add("data.input_dims", {[](auto& c, auto& k, auto& v) { c.data.input_dims = to_sizes(k, v); },
                            [](auto& c) { return join(c.data.input_dims); }});
    add("data.snr", {[](auto& c, auto& k, auto& v) { c.data.snr = to_reals(k, v); },
                     [](auto& c) { return join(c.data.snr); }});
    add("data.noise_std", {[](auto& c, auto& k, auto& v) { c.data.noise_std = to_reals(k, v); },
                           [](auto& c) { return join(c.data.noise_std); }});
    add("data.domain_shift",
        {[](auto& c, auto& k, auto& v) { c.data.domain_shift = to_reals(k, v); },
         [](auto& c) { return join(c.data.domain_shift); }});
    add("data.mean_shift_scale",
        {[](auto& c, auto& k, auto& v) { c.data.mean_shift_scale = to_real(k, v); },
         [](auto& c) { return format_double(c.data.mean_shift_scale); }});
    add("data.centroid_scale",
        {[](auto& c, auto& k, auto& v) { c.data.centroid_scale = to_real(k, v); },
         [](auto& c) { return format_double(c.data.centroid_scale); }});

    add("model.hidden_dims",
        {[](auto& c, auto& k, auto& v) { c.model.hidden_dims = to_sizes(k, v); },
         [](auto& c) { return join(c.model.hidden_dims); }});
    add("model.feature_dims",
        {[](auto& c, auto& k, auto& v) { c.model.feature_dims = to_sizes(k, v); },
         [](auto& c) { return join(c.model.feature_dims); }});

    add("train.lambda", {[](auto& c, auto& k, auto& v) { c.train.lambda = to_real(k, v); },
                         [](auto& c) { return format_double(c.train.lambda); }});
    add("train.alpha", {[](auto& c, auto& k, auto& v) { c.train.alpha = to_real(k, v); },
                        [](auto& c) { return format_double(c.train.alpha); }});
    add("train.ema_beta", {[](auto& c, auto& k, auto& v) { c.train.ema_beta = to_real(k, v); },
                           [](auto& c) { return format_double(c.train.ema_beta); }});
    add("train.learning_rate",
        {[](auto& c, auto& k, auto& v) { c.train.learning_rate = to_real(k, v); },
         [](auto& c) { return format_double(c.train.learning_rate); }});
    add("train.batch_size", {[](auto& c, auto& k, auto& v) { c.train.batch_size = to_size(k, v); },
                             [](auto& c) { return std::to_string(c.train.batch_size); }});
    add("train.epochs", {[](auto& c, auto& k, auto& v) { c.train.epochs = to_size(k, v); },
                         [](auto& c) { return std::to_string(c.train.epochs); }});
    add("train.eval_model",
        {[=](auto& c, auto&, auto& v) {
           try {
             c.train.eval_model = parse_eval_model(str(v));
           } catch (const std::invalid_argument& e) {
             throw ConfigError(e.what());
           }
         },
         [](auto& c) { return to_string(c.train.eval_model); }});
    add("train.amd", {[](auto& c, auto& k, auto& v) { c.train.amd_enabled = to_bool(k, v); },
                      [=](auto& c) { return b(c.train.amd_enabled); }});
    add("train.gcc", {[](auto& c, auto& k, auto& v) { c.train.gcc_enabled = to_bool(k, v); },
                      [=](auto& c) { return b(c.train.gcc_enabled); }});
    add("train.distill", {[](auto& c, auto& k, auto& v) { c.train.distill_enabled = to_bool(k, v); },
                          [=](auto& c) { return b(c.train.distill_enabled); }});
    add("train.ema", {[](auto& c, auto& k, auto& v) { c.train.ema_enabled = to_bool(k, v); },
                      [=](auto& c) { return b(c.train.ema_enabled); }});

    add("flatness.enabled", {[](auto& c, auto& k, auto& v) { c.flatness.enabled = to_bool(k, v); },
                             [=](auto& c) { return b(c.flatness.enabled); }});
    add("flatness.radii", {[](auto& c, auto& k, auto& v) { c.flatness.radii = to_reals(k, v); },
                           [](auto& c) { return join(c.flatness.radii); }});
    add("flatness.n_directions",
        {[](auto& c, auto& k, auto& v) { c.flatness.n_directions = to_size(k, v); },
         [](auto& c) { return std::to_string(c.flatness.n_directions); }});
    add("flatness.split", {[=](auto& c, auto&, auto& v) { c.flatness.split = str(v); },
                           [](auto& c) { return c.flatness.split; }});

    add("robustness.modality",
        {[](auto& c, auto& k, auto& v) {
           const std::size_t m = to_size(k, v);
           if (m < 1) throw ConfigError(k + ": modalities are numbered from 1");
           c.robustness.modality = m - 1;
         },
         [](auto& c) { return std::to_string(c.robustness.modality + 1); }});
    add("robustness.variances",
        {[](auto& c, auto& k, auto& v) { c.robustness.variances = to_reals(k, v); },
         [](auto& c) { return join(c.robustness.variances); }});
    return t;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& [name, field] : fields()) {
    if (name == key) return &field;
  }
  return nullptr;
}

void sync_model(ExperimentConfig& c) {
  c.model.modalities = c.data.modalities;
  c.model.input_dims = c.data.input_dims;
  c.model.num_classes = c.data.num_classes;
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys = [] {
    std::vector<std::string> k;
    for (const auto& [name, field] : fields()) k.push_back(name);
    return k;
  }();
  return keys;
}

std::size_t parse_domain(const std::string& text) {
  std::string t = trim(text);
  if (!t.empty() && (t[0] == 'D' || t[0] == 'd')) t = t.substr(1);
  const std::size_t n = to_size("domain", t);
  if (n < 1) throw ConfigError("domain: domains are numbered from 1 (D1, D2, ...)");
  return n - 1;
}

void apply_setting(ExperimentConfig& config, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (f == nullptr) throw ConfigError("unknown config key '" + key + "'");
  f->set(config, key, value);
  sync_model(config);
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  ExperimentConfig config = ExperimentConfig::defaults();
  bool versioned = false;
  for (const auto& [section, node] : tree) {
    if (node.empty()) {
      if (section != "format_version") {
        if (node.data().empty()) continue;  // section without keys
        throw ConfigError("unknown top-level key '" + section + "'");
      }
      if (trim(node.data()) != std::to_string(kFormatVersion)) {
        throw ConfigError("unsupported format_version " + node.data() + " (expected " +
                          std::to_string(kFormatVersion) + ")");
      }
      versioned = true;
      continue;
    }
    for (const auto& [key, leaf] : node) apply_setting(config, section + "." + key, leaf.data());
  }
  if (!versioned) throw ConfigError("config is missing format_version");
  sync_model(config);
  return config;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string serialize_config(const ExperimentConfig& config) {
  std::ostringstream out;
  out << "format_version = " << kFormatVersion << '\n';
  std::string current;
  for (const auto& [name, field] : fields()) {
    const auto dot = name.find('.');
    const std::string section = name.substr(0, dot);
    if (section != current) {
      out << "\n[" << section << "]\n";
      current = section;
    }
    out << name.substr(dot + 1) << " = " << field.get(config) << '\n';
  }
  return out.str();
}

}  // namespace mmdg
