#include "mmdg/checkpoint.hpp"

#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "mmdg/format.hpp"

namespace mmdg {

namespace {

constexpr const char* kMagic = "mmdg-checkpoint";

std::string dims_text(const Shape& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) out += (i ? "x" : "") + std::to_string(shape[i]);
  return out;
}

std::string list_text(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::vector<std::size_t> parse_list(const std::string& text) {
  std::vector<std::size_t> out;
  for (const std::string& s : split(text, ',')) out.push_back(std::stoull(s));
  return out;
}

struct Entry {
  std::string section;
  std::string name;
  Tensor* target;
};

template <class Model>
void collect(Model& model, const std::string& section, std::vector<Entry>& out) {
  visit_params(model, [&](const std::string& name, Tensor& t) { out.push_back({section, name, &t}); });
}

std::string expect_line(std::istream& in, const std::string& what) {
  std::string line;
  if (!std::getline(in, line)) throw ModelError("checkpoint: unexpected end of file, expected " + what);
  return line;
}

std::string expect_key(std::istream& in, const std::string& key) {
  const std::string line = expect_line(in, key);
  const auto eq = line.find('=');
  if (eq == std::string::npos || trim(line.substr(0, eq)) != key) {
    throw ModelError("checkpoint: expected '" + key + " = ...', got '" + line + "'");
  }
  return trim(line.substr(eq + 1));
}

}  // namespace

void write_checkpoint(const Checkpoint& checkpoint, std::ostream& out) {
  const ModelConfig& c = checkpoint.config;
  Checkpoint copy = checkpoint;
  std::vector<Entry> entries;
  if (copy.student) collect(*copy.student, "student", entries);
  if (copy.teacher) collect(*copy.teacher, "teacher", entries);

  out << kMagic << '\n';
  out << "format_version = " << kCheckpointFormatVersion << '\n';
  out << "modalities = " << c.modalities << '\n';
  out << "input_dims = " << list_text(c.input_dims) << '\n';
  out << "hidden_dims = " << list_text(c.hidden_dims) << '\n';
  out << "feature_dims = " << list_text(c.feature_dims) << '\n';
  out << "num_classes = " << c.num_classes << '\n';
  out << "init_seed = " << c.init_seed << '\n';
  out << "tensors = " << entries.size() << '\n';
  for (const Entry& e : entries) {
    out << e.section << ' ' << e.name << ' ' << dims_text(e.target->shape()) << '\n';
  }
  out << "data\n";
  for (const Entry& e : entries) {
    const auto values = e.target->values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      out << (i ? " " : "") << format_double(values[i]);
    }
    out << '\n';
  }
}

Checkpoint read_checkpoint(std::istream& in) {
  if (expect_line(in, "magic") != kMagic) throw ModelError("checkpoint: not a checkpoint file");
  const std::string version = expect_key(in, "format_version");
  if (version != std::to_string(kCheckpointFormatVersion)) {
    throw ModelError("checkpoint: unsupported format_version " + version);
  }
  Checkpoint cp;
  try {
    cp.config.modalities = std::stoull(expect_key(in, "modalities"));
    cp.config.input_dims = parse_list(expect_key(in, "input_dims"));
    cp.config.hidden_dims = parse_list(expect_key(in, "hidden_dims"));
    cp.config.feature_dims = parse_list(expect_key(in, "feature_dims"));
    cp.config.num_classes = std::stoull(expect_key(in, "num_classes"));
    cp.config.init_seed = std::stoull(expect_key(in, "init_seed"));
  } catch (const std::logic_error&) {
    throw ModelError("checkpoint: malformed header value");
  }
  try {
    cp.config.validate();
  } catch (const std::invalid_argument& e) {
    throw ModelError(std::string("checkpoint: ") + e.what());
  }
  const std::size_t count = std::stoull(expect_key(in, "tensors"));

  // Layout templates; every tensor listed in the manifest must fill one of them.
  const ModelParams shape_template = init_params(cp.config);
  std::map<std::string, std::string> manifest;  // "section name" -> dims
  std::vector<std::string> order;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream line(expect_line(in, "manifest entry"));
    std::string section, name, dims;
    if (!(line >> section >> name >> dims)) throw ModelError("checkpoint: malformed manifest line");
    if (section != "student" && section != "teacher") {
      throw ModelError("checkpoint: unknown section '" + section + "'");
    }
    if (section == "student" && !cp.student) cp.student = shape_template;
    if (section == "teacher" && !cp.teacher) cp.teacher = fused_part(shape_template);
    const std::string key = section + " " + name;
    if (!manifest.emplace(key, dims).second) throw ModelError("checkpoint: duplicate " + key);
    order.push_back(key);
  }
  if (expect_line(in, "data") != "data") throw ModelError("checkpoint: missing data marker");

  std::vector<Entry> entries;
  if (cp.student) collect(*cp.student, "student", entries);
  if (cp.teacher) collect(*cp.teacher, "teacher", entries);
  std::map<std::string, Tensor*> targets;
  for (const Entry& e : entries) targets[e.section + " " + e.name] = e.target;
  if (targets.size() != manifest.size()) {
    throw ModelError("checkpoint: manifest lists " + std::to_string(manifest.size()) +
                     " tensors, the sections need " + std::to_string(targets.size()));
  }
  for (const std::string& key : order) {
    auto it = targets.find(key);
    if (it == targets.end()) throw ModelError("checkpoint: unexpected tensor '" + key + "'");
    Tensor& t = *it->second;
    if (manifest[key] != dims_text(t.shape())) {
      throw ModelError("checkpoint: " + key + " has shape " + manifest[key] + ", expected " +
                       dims_text(t.shape()));
    }
    std::istringstream line(expect_line(in, "values of " + key));
    std::string token;
    std::size_t i = 0;
    while (line >> token) {
      if (i >= t.size()) throw ModelError("checkpoint: too many values for " + key);
      try {
        t[i++] = parse_double(token);
      } catch (const std::invalid_argument&) {
        throw ModelError("checkpoint: bad value '" + token + "' in " + key);
      }
    }
    if (i != t.size()) throw ModelError("checkpoint: too few values for " + key);
  }
  return cp;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ModelError("checkpoint: cannot write " + path.string());
  write_checkpoint(checkpoint, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ModelError("checkpoint: cannot read " + path.string());
  return read_checkpoint(in);
}

}  // namespace mmdg
