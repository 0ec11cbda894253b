#include <fstream>
#include <map>
#include <sstream>

#include "mmdg/format.hpp"
#include "mmdg/synthdata.hpp"

namespace mmdg {

namespace {

template <typename T>
std::string join(const std::vector<T>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    if constexpr (std::is_floating_point_v<T>) {
      out += format_double(values[i]);
    } else {
      out += std::to_string(values[i]);
    }
  }
  return out;
}

std::size_t to_size(const std::string& key, const std::string& text) {
  std::size_t pos = 0;
  unsigned long long v = 0;
  try {
    v = std::stoull(text, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != text.size() || text.empty() || text[0] == '-') {
    throw DataError("manifest: bad integer for " + key + ": '" + text + "'");
  }
  return static_cast<std::size_t>(v);
}

std::vector<std::size_t> size_list(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (const std::string& p : split(text, ',')) out.push_back(to_size(key, trim(p)));
  return out;
}

std::vector<double> double_list(const std::string& text) {
  std::vector<double> out;
  for (const std::string& p : split(text, ',')) out.push_back(parse_double(trim(p)));
  return out;
}

std::string file_stem(std::size_t domain, SplitKind kind) {
  return "D" + std::to_string(domain + 1) + "_" + to_string(kind);
}

void write_matrix(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (std::size_t r = 0; r < t.row_count(); ++r) {
    const auto row = t.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) out << (c ? "," : "") << format_double(row[c]);
    out << '\n';
  }
}

Tensor read_matrix(const std::filesystem::path& path, std::size_t rows, std::size_t cols) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path.string());
  std::vector<double> values;
  values.reserve(rows * cols);
  std::string line;
  std::size_t r = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != cols) {
      throw DataError(path.filename().string() + ":" + std::to_string(r + 1) + ": expected " +
                      std::to_string(cols) + " columns, got " + std::to_string(cells.size()));
    }
    for (const std::string& c : cells) values.push_back(parse_double(c));
    ++r;
  }
  if (r != rows) {
    throw DataError(path.filename().string() + ": expected " + std::to_string(rows) + " rows, got " +
                    std::to_string(r));
  }
  return Tensor({rows, cols}, std::move(values));
}

}  // namespace

std::string serialize_datagen(const DataGenConfig& c) {
  std::ostringstream out;
  out << "modalities=" << c.modalities << '\n'
      << "num_domains=" << c.num_domains << '\n'
      << "num_classes=" << c.num_classes << '\n'
      << "latent_dim=" << c.latent_dim << '\n'
      << "train_per_domain=" << c.train_per_domain << '\n'
      << "val_per_domain=" << c.val_per_domain << '\n'
      << "test_per_domain=" << c.test_per_domain << '\n'
      << "input_dims=" << join(c.input_dims) << '\n'
      << "snr=" << join(c.snr) << '\n'
      << "noise_std=" << join(c.noise_std) << '\n'
      << "domain_shift=" << join(c.domain_shift) << '\n'
      << "mean_shift_scale=" << format_double(c.mean_shift_scale) << '\n'
      << "centroid_scale=" << format_double(c.centroid_scale) << '\n'
      << "seed=" << c.seed << '\n';
  return out.str();
}

void export_dataset(const MultiModalDataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream manifest(dir / "manifest.txt");
    if (!manifest) throw DataError("cannot write " + (dir / "manifest.txt").string());
    manifest << "mmdg-dataset\nformat_version=1\n" << serialize_datagen(dataset.config);
  }
  for (const DomainData& d : dataset.domains) {
    for (SplitKind kind : {SplitKind::train, SplitKind::val, SplitKind::test}) {
      const SplitData& s = d.split(kind);
      const std::string stem = file_stem(d.spec.domain_id, kind);
      for (std::size_t k = 0; k < s.modalities.size(); ++k) {
        write_matrix(s.modalities[k], dir / (stem + "_m" + std::to_string(k + 1) + ".csv"));
      }
      std::ofstream labels(dir / (stem + "_labels.csv"));
      for (int y : s.labels) labels << y << '\n';
    }
  }
}

MultiModalDataset import_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw DataError("cannot read " + (dir / "manifest.txt").string());
  std::string line;
  if (!std::getline(in, line) || line != "mmdg-dataset") throw DataError("manifest: bad magic line");
  std::map<std::string, std::string> kv;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("manifest: expected key=value, got '" + line + "'");
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto get = [&](const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DataError("manifest: missing " + key);
    return it->second;
  };
  if (get("format_version") != "1") throw DataError("manifest: unsupported format_version");
  DataGenConfig c;
  c.modalities = to_size("modalities", get("modalities"));
  c.num_domains = to_size("num_domains", get("num_domains"));
  c.num_classes = to_size("num_classes", get("num_classes"));
  c.latent_dim = to_size("latent_dim", get("latent_dim"));
  c.train_per_domain = to_size("train_per_domain", get("train_per_domain"));
  c.val_per_domain = to_size("val_per_domain", get("val_per_domain"));
  c.test_per_domain = to_size("test_per_domain", get("test_per_domain"));
  c.input_dims = size_list("input_dims", get("input_dims"));
  c.snr = double_list(get("snr"));
  c.noise_std = double_list(get("noise_std"));
  c.domain_shift = double_list(get("domain_shift"));
  c.mean_shift_scale = parse_double(get("mean_shift_scale"));
  c.centroid_scale = parse_double(get("centroid_scale"));
  c.seed = to_size("seed", get("seed"));
  c.validate();

  MultiModalDataset ds;
  ds.config = c;
  std::vector<DomainSpec> specs = make_domain_specs(c);
  for (std::size_t d = 0; d < c.num_domains; ++d) {
    DomainData dd;
    dd.spec = std::move(specs[d]);
    for (SplitKind kind : {SplitKind::train, SplitKind::val, SplitKind::test}) {
      const std::size_t rows = kind == SplitKind::train ? c.train_per_domain
                               : kind == SplitKind::val ? c.val_per_domain
                                                        : c.test_per_domain;
      const std::string stem = file_stem(d, kind);
      SplitData s;
      for (std::size_t k = 0; k < c.modalities; ++k) {
        s.modalities.push_back(
            read_matrix(dir / (stem + "_m" + std::to_string(k + 1) + ".csv"), rows, c.input_dims[k]));
      }
      const Tensor labels = read_matrix(dir / (stem + "_labels.csv"), rows, 1);
      for (double v : labels.values()) {
        const int y = static_cast<int>(v);
        if (y != v || y < 0 || static_cast<std::size_t>(y) >= c.num_classes) {
          throw DataError(stem + "_labels.csv: label out of range");
        }
        s.labels.push_back(y);
      }
      (kind == SplitKind::train ? dd.train : kind == SplitKind::val ? dd.val : dd.test) = std::move(s);
    }
    ds.domains.push_back(std::move(dd));
  }
  return ds;
}

}  // namespace mmdg
