#include "mbf/io.hpp"

#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "mbf/error.hpp"

namespace mbf::io {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "curve files are read and written as native little-endian doubles");

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::string& text, const std::string& where) {
  if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
  double v = 0.0;
  const char* end = text.data() + text.size();
  const auto r = std::from_chars(text.data(), end, v);
  if (r.ec != std::errc() || r.ptr != end)
    fail(ErrorKind::Parse, where + ": cannot parse number '" + text + "'");
  return v;
}

std::string read_text(const fs::path& file) {
  if (!fs::exists(file)) fail(ErrorKind::MissingArtifact, "missing file " + file.string());
  std::ifstream in(file, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) fail(ErrorKind::Io, "cannot write " + file.string());
}

namespace {

json parse_json(const fs::path& file) {
  const std::string text = read_text(file);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    fail(ErrorKind::Parse, file.string() + " at byte " + std::to_string(e.byte) +
                               ": malformed JSON");
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) fail(ErrorKind::Parse, where + ": missing field '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    fail(ErrorKind::Parse, where + ": field '" + key + "' has the wrong type");
  }
}

void check_version(const json& j, const fs::path& file) {
  const int v = field<int>(j, "format_version", file.string());
  if (v != kFormatVersion)
    fail(ErrorKind::UnsupportedVersion,
         file.string() + ": unsupported version " + std::to_string(v));
}

json to_json(const TimeGrid& g) { return {{"t0", g.t0}, {"dt", g.dt}, {"n", g.n}}; }

TimeGrid grid_from(const json& j, const std::string& where) {
  TimeGrid g;
  g.t0 = field<double>(j, "t0", where);
  g.dt = field<double>(j, "dt", where);
  g.n = field<std::size_t>(j, "n", where);
  if (!g.valid()) fail(ErrorKind::Parse, where + ": invalid time grid");
  return g;
}

json to_json(const Interval& i) { return json::array({i.lo, i.hi}); }

Interval interval_from(const json& j, const char* key, const std::string& where) {
  const auto v = field<std::vector<double>>(j, key, where);
  if (v.size() != 2) fail(ErrorKind::Parse, where + ": '" + key + "' must hold two numbers");
  return {v[0], v[1]};
}

json to_json(const PhantomSpec& s) {
  json j = {{"patient_id", s.patient_id},
            {"width", s.width},
            {"height", s.height},
            {"grid", to_json(s.grid)},
            {"aif",
             {{"amplitude", s.aif.amplitude},
              {"shape", s.aif.shape},
              {"timescale", s.aif.timescale},
              {"onset", s.aif.onset},
              {"recirc_fraction", s.aif.recirc_fraction},
              {"recirc_lag", s.aif.recirc_lag}}},
            {"base_mbf", s.base_mbf},
            {"mbf_smoothness", s.mbf_smoothness},
            {"mbf_variation", s.mbf_variation},
            {"defect", nullptr},
            {"ps_range", to_json(s.ps_range)},
            {"vp_range", to_json(s.vp_range)},
            {"ve_range", to_json(s.ve_range)},
            {"delay_jitter", to_json(s.delay_jitter)},
            {"noise_sigma", s.noise_sigma},
            {"mask_inner", s.mask_inner},
            {"seed", s.seed}};
  if (s.defect)
    j["defect"] = {{"cx", s.defect->cx},
                   {"cy", s.defect->cy},
                   {"radius", s.defect->radius},
                   {"severity", s.defect->severity}};
  return j;
}

PhantomSpec spec_from(const json& j, const std::string& where) {
  PhantomSpec s;
  s.patient_id = field<std::string>(j, "patient_id", where);
  s.width = field<int>(j, "width", where);
  s.height = field<int>(j, "height", where);
  s.grid = grid_from(field<json>(j, "grid", where), where);
  const json a = field<json>(j, "aif", where);
  s.aif.amplitude = field<double>(a, "amplitude", where);
  s.aif.shape = field<double>(a, "shape", where);
  s.aif.timescale = field<double>(a, "timescale", where);
  s.aif.onset = field<double>(a, "onset", where);
  s.aif.recirc_fraction = field<double>(a, "recirc_fraction", where);
  s.aif.recirc_lag = field<double>(a, "recirc_lag", where);
  s.base_mbf = field<double>(j, "base_mbf", where);
  s.mbf_smoothness = field<double>(j, "mbf_smoothness", where);
  s.mbf_variation = field<double>(j, "mbf_variation", where);
  const json d = field<json>(j, "defect", where);
  if (!d.is_null())
    s.defect = Defect{field<double>(d, "cx", where), field<double>(d, "cy", where),
                      field<double>(d, "radius", where), field<double>(d, "severity", where)};
  s.ps_range = interval_from(j, "ps_range", where);
  s.vp_range = interval_from(j, "vp_range", where);
  s.ve_range = interval_from(j, "ve_range", where);
  s.delay_jitter = interval_from(j, "delay_jitter", where);
  s.noise_sigma = field<double>(j, "noise_sigma", where);
  s.mask_inner = field<double>(j, "mask_inner", where);
  s.seed = field<std::uint64_t>(j, "seed", where);
  return s;
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// --- curve files

void write_curves(const Patient& p, const fs::path& file) {
  std::string bytes = "PKC1";
  auto append = [&](const std::vector<double>& v) {
    const std::size_t off = bytes.size();
    bytes.resize(off + v.size() * sizeof(double));
    std::memcpy(bytes.data() + off, v.data(), v.size() * sizeof(double));
  };
  append(p.aif.values);
  for (const Curve& c : p.tissue) append(c.values);
  write_text(file, bytes);
}

void read_curves(Patient& p, const TimeGrid& grid, std::size_t masked, const fs::path& file) {
  const std::string bytes = read_text(file);
  if (bytes.size() < 4 || bytes.compare(0, 4, "PKC1") != 0)
    fail(ErrorKind::BadMagic, file.string() + " at offset 0: bad magic, expected PKC1");
  const std::size_t expected = grid.n * (masked + 1);
  const std::size_t payload = bytes.size() - 4;
  if (payload % sizeof(double) != 0 || payload / sizeof(double) != expected)
    fail(ErrorKind::CountMismatch,
         "curve count mismatch for patient " + p.id + " in " + file.string() + ": expected " +
             std::to_string(expected) + " values, file holds " + std::to_string(payload) +
             " bytes");
  std::vector<double> all(expected);
  std::memcpy(all.data(), bytes.data() + 4, payload);
  for (std::size_t i = 0; i < all.size(); ++i)
    if (!std::isfinite(all[i]))
      fail(ErrorKind::NonFinite, file.string() + " at offset " +
                                     std::to_string(4 + i * sizeof(double)) +
                                     ": non-finite value");
  auto curve = [&](std::size_t k) {
    const auto first = all.begin() + static_cast<std::ptrdiff_t>(k * grid.n);
    return Curve(grid, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(grid.n)));
  };
  p.aif = curve(0);
  p.tissue.clear();
  for (std::size_t k = 0; k < masked; ++k) p.tissue.push_back(curve(k + 1));
}

// --- mask files

void write_mask(const Patient& p, const fs::path& file) {
  std::string text;
  for (int y = 0; y < p.height; ++y) {
    for (int x = 0; x < p.width; ++x)
      text += p.mask[static_cast<std::size_t>(y) * p.width + x] ? '1' : '0';
    text += '\n';
  }
  write_text(file, text);
}

void read_mask(Patient& p, const fs::path& file) {
  const auto lines = lines_of(read_text(file));
  if (static_cast<int>(lines.size()) != p.height)
    fail(ErrorKind::CountMismatch, file.string() + ": expected " + std::to_string(p.height) +
                                       " rows, found " + std::to_string(lines.size()));
  p.mask.assign(static_cast<std::size_t>(p.width) * p.height, 0);
  for (int y = 0; y < p.height; ++y) {
    const std::string& row = lines[static_cast<std::size_t>(y)];
    if (static_cast<int>(row.size()) != p.width)
      fail(ErrorKind::CountMismatch, file.string() + " line " + std::to_string(y + 1) +
                                         ": expected " + std::to_string(p.width) + " columns");
    for (int x = 0; x < p.width; ++x) {
      const char c = row[static_cast<std::size_t>(x)];
      if (c != '0' && c != '1')
        fail(ErrorKind::Parse, file.string() + " line " + std::to_string(y + 1) + " column " +
                                   std::to_string(x + 1) + ": expected 0 or 1");
      p.mask[static_cast<std::size_t>(y) * p.width + x] = c == '1';
    }
  }
}

// --- truth files

void write_truth(const Patient& p, const fs::path& file) {
  std::string text = "x,y,fp,ps,vp,ve,delay\n";
  const auto voxels = p.masked_indices();
  for (std::size_t k = 0; k < voxels.size(); ++k) {
    const KineticParams& t = p.truth[k];
    text += std::to_string(voxels[k] % p.width) + "," + std::to_string(voxels[k] / p.width);
    for (double v : {t.fp, t.ps, t.vp, t.ve, t.delay}) text += "," + format_double(v);
    text += '\n';
  }
  write_text(file, text);
}

void read_truth(Patient& p, const fs::path& file) {
  const auto lines = lines_of(read_text(file));
  const auto voxels = p.masked_indices();
  if (lines.empty() || lines[0] != "x,y,fp,ps,vp,ve,delay")
    fail(ErrorKind::Parse, file.string() + " line 1: unexpected header");
  if (lines.size() - 1 != voxels.size())
    fail(ErrorKind::CountMismatch, "truth row count mismatch for patient " + p.id + " in " +
                                       file.string() + ": expected " +
                                       std::to_string(voxels.size()) + " rows");
  p.truth.clear();
  for (std::size_t k = 0; k < voxels.size(); ++k) {
    const std::string where = file.string() + " line " + std::to_string(k + 2);
    const auto cells = split(lines[k + 1], ',');
    if (cells.size() != 7) fail(ErrorKind::Parse, where + ": expected 7 fields");
    const auto x = static_cast<std::size_t>(parse_double(cells[0], where));
    const auto y = static_cast<std::size_t>(parse_double(cells[1], where));
    if (y * p.width + x != voxels[k])
      fail(ErrorKind::Parse, where + ": voxel does not match the mask order");
    KineticParams t{parse_double(cells[2], where), parse_double(cells[3], where),
                    parse_double(cells[4], where), parse_double(cells[5], where),
                    parse_double(cells[6], where)};
    for (double v : {t.fp, t.ps, t.vp, t.ve, t.delay})
      if (!std::isfinite(v)) fail(ErrorKind::NonFinite, where + ": non-finite value");
    p.truth.push_back(t);
  }
}

}  // namespace

void write_dataset(const PhantomDataset& dataset, const fs::path& dir) {
  dataset.validate();
  fs::create_directories(dir);
  json patients = json::array();
  for (const Patient& p : dataset.patients) {
    const std::string curves = p.id + ".pkc", mask = p.id + "_mask.txt",
                      truth = p.id + "_truth.csv";
    write_curves(p, dir / curves);
    write_mask(p, dir / mask);
    write_truth(p, dir / truth);
    json entry = {{"id", p.id},
                  {"width", p.width},
                  {"height", p.height},
                  {"grid", to_json(p.grid())},
                  {"masked_voxels", p.voxel_count()},
                  {"curves", curves},
                  {"mask", mask},
                  {"truth", truth},
                  {"spec", p.spec ? to_json(*p.spec) : json(nullptr)}};
    patients.push_back(entry);
  }
  const json manifest = {{"format_version", kFormatVersion}, {"patients", patients}};
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

PhantomDataset read_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path))
    fail(ErrorKind::MissingArtifact, "missing dataset manifest " + manifest_path.string());
  const json manifest = parse_json(manifest_path);
  check_version(manifest, manifest_path);
  const std::string where = manifest_path.string();

  PhantomDataset ds;
  for (const json& entry : field<json>(manifest, "patients", where)) {
    Patient p;
    p.id = field<std::string>(entry, "id", where);
    const std::string pwhere = where + " patient " + p.id;
    p.width = field<int>(entry, "width", pwhere);
    p.height = field<int>(entry, "height", pwhere);
    if (p.width < 1 || p.height < 1) fail(ErrorKind::Parse, pwhere + ": invalid grid size");
    const TimeGrid grid = grid_from(field<json>(entry, "grid", pwhere), pwhere);

    read_mask(p, dir / field<std::string>(entry, "mask", pwhere));
    std::size_t masked = 0;
    for (auto m : p.mask) masked += m;
    const auto declared = field<std::size_t>(entry, "masked_voxels", pwhere);
    if (declared != masked)
      fail(ErrorKind::CountMismatch, pwhere + ": manifest declares " +
                                         std::to_string(declared) + " masked voxels, mask has " +
                                         std::to_string(masked));
    read_curves(p, grid, masked, dir / field<std::string>(entry, "curves", pwhere));
    read_truth(p, dir / field<std::string>(entry, "truth", pwhere));
    const json spec = field<json>(entry, "spec", pwhere);
    if (!spec.is_null()) p.spec = spec_from(spec, pwhere);
    p.validate();
    ds.patients.push_back(std::move(p));
  }
  return ds;
}

// --- maps

std::string map_filename(const std::string& patient_id) { return patient_id + "_mbf.csv"; }

void write_map(const MbfMap& map, const fs::path& file) {
  std::string text = "patient," + map.patient_id + ",units,mL/min/mL\n";
  for (int y = 0; y < map.height; ++y) {
    for (int x = 0; x < map.width; ++x) {
      if (x) text += ',';
      text += format_double(map.at(x, y));
    }
    text += '\n';
  }
  write_text(file, text);
}

MbfMap read_map(const fs::path& file) {
  const auto lines = lines_of(read_text(file));
  const std::string where = file.string();
  if (lines.empty()) fail(ErrorKind::Parse, where + ": empty map file");
  const auto header = split(lines[0], ',');
  if (header.size() != 4 || header[0] != "patient" || header[2] != "units")
    fail(ErrorKind::Parse, where + " line 1: expected 'patient,<id>,units,<units>'");
  if (lines.size() < 2) fail(ErrorKind::Parse, where + ": map has no rows");
  const int height = static_cast<int>(lines.size()) - 1;
  const int width = static_cast<int>(split(lines[1], ',').size());
  MbfMap map(header[1], width, height);
  for (int y = 0; y < height; ++y) {
    const std::string lwhere = where + " line " + std::to_string(y + 2);
    const auto cells = split(lines[static_cast<std::size_t>(y) + 1], ',');
    if (static_cast<int>(cells.size()) != width)
      fail(ErrorKind::CountMismatch, lwhere + ": expected " + std::to_string(width) + " values");
    for (int x = 0; x < width; ++x) map.at(x, y) = parse_double(cells[static_cast<std::size_t>(x)], lwhere);
  }
  return map;
}

void write_maps(const std::vector<MbfMap>& maps, const fs::path& dir) {
  for (const MbfMap& m : maps) write_map(m, dir / map_filename(m.patient_id));
}

std::vector<MbfMap> read_maps(const fs::path& dir, const std::vector<std::string>& ids) {
  std::vector<MbfMap> out;
  for (const std::string& id : ids) {
    const fs::path file = dir / map_filename(id);
    if (!fs::exists(file)) fail(ErrorKind::MissingArtifact, "missing map file " + file.string());
    out.push_back(read_map(file));
    if (out.back().patient_id != id)
      fail(ErrorKind::Parse, file.string() + ": header names patient " +
                                 out.back().patient_id + ", expected " + id);
  }
  return out;
}

// --- weights

namespace {

json to_json(const NetworkConfig& c) {
  auto branch = [](const std::vector<ConvSpec>& specs) {
    json a = json::array();
    for (const ConvSpec& s : specs) a.push_back({{"out_channels", s.out_channels}, {"kernel", s.kernel}});
    return a;
  };
  return {{"input_length", c.input_length},
          {"aif_branch", branch(c.aif_branch)},
          {"tissue_branch", branch(c.tissue_branch)},
          {"pool", c.pool},
          {"dense", c.dense},
          {"seed", c.seed}};
}

NetworkConfig network_from(const json& j, const std::string& where) {
  NetworkConfig c;
  auto branch = [&](const char* key) {
    std::vector<ConvSpec> specs;
    for (const json& s : field<json>(j, key, where))
      specs.push_back({field<int>(s, "out_channels", where), field<int>(s, "kernel", where)});
    return specs;
  };
  c.input_length = field<int>(j, "input_length", where);
  c.aif_branch = branch("aif_branch");
  c.tissue_branch = branch("tissue_branch");
  c.pool = field<int>(j, "pool", where);
  c.dense = field<std::vector<int>>(j, "dense", where);
  c.seed = field<std::uint64_t>(j, "seed", where);
  return c;
}

}  // namespace

void write_weights(const NetworkWeights& weights, const fs::path& file) {
  json tensors = json::array();
  for (std::size_t i = 0; i < weights.tensors.size(); ++i)
    tensors.push_back({{"name", weights.names[i]},
                       {"shape", weights.tensors[i].shape},
                       {"values", weights.tensors[i].values}});
  const json j = {{"format_version", kFormatVersion},
                  {"config", to_json(weights.config)},
                  {"tensors", tensors}};
  write_text(file, j.dump() + "\n");
}

NetworkWeights read_weights(const fs::path& file) {
  const json j = parse_json(file);
  check_version(j, file);
  const std::string where = file.string();
  NetworkWeights w;
  w.config = network_from(field<json>(j, "config", where), where);
  for (const json& t : field<json>(j, "tensors", where)) {
    w.names.push_back(field<std::string>(t, "name", where));
    w.tensors.emplace_back(field<std::vector<std::size_t>>(t, "shape", where),
                           field<std::vector<double>>(t, "values", where));
  }
  try {
    w.validate();
  } catch (const Error& e) {
    fail(e.kind() == ErrorKind::NonFinite ? ErrorKind::NonFinite : ErrorKind::Parse,
         where + ": " + e.what());
  }
  return w;
}

void write_history(const std::vector<EpochRecord>& history, const fs::path& file) {
  std::string text = "epoch,train_mse,val_mse\n";
  for (const EpochRecord& r : history)
    text += std::to_string(r.epoch) + "," + format_double(r.train_mse) + "," +
            format_double(r.val_mse) + "\n";
  write_text(file, text);
}

// --- reports

namespace {

json to_json(const Timing& t) {
  return {{"patient_id", t.patient_id},
          {"voxels", t.voxels},
          {"same_voxels", t.same_voxels},
          {"workers", t.workers},
          {"mcmc_seconds", t.mcmc_seconds},
          {"surrogate_seconds", t.surrogate_seconds},
          {"mcmc_seconds_per_voxel", t.mcmc_per_voxel()},
          {"surrogate_seconds_per_voxel", t.surrogate_per_voxel()},
          {"speedup", t.speedup()}};
}

}  // namespace

void write_report(const EvalReport& report, const fs::path& file) {
  json splits = json::array();
  for (const SplitResult& s : report.splits)
    splits.push_back({{"index", s.index},
                      {"train", s.split.train},
                      {"val", s.split.val},
                      {"test", s.split.test},
                      {"mse", s.metrics.mse},
                      {"rel_error", s.metrics.rel_error},
                      {"voxels", s.metrics.voxels},
                      {"pred_median", s.metrics.pooled.median},
                      {"pred_p25", s.metrics.pooled.p25},
                      {"pred_p75", s.metrics.pooled.p75},
                      {"best_epoch", s.best_epoch},
                      {"epochs", s.epochs}});
  json j = {{"format_version", kFormatVersion},
            {"splits", splits},
            {"aggregate",
             {{"mse_mean", report.mse_mean},
              {"mse_std", report.mse_std},
              {"rel_error_mean", report.rel_error_mean},
              {"mse", report.summary()}}}};
  if (report.timing) j["timing"] = to_json(*report.timing);
  write_text(file, j.dump(2) + "\n");
}

void write_timing(const Timing& timing, const fs::path& file) {
  write_text(file, to_json(timing).dump(2) + "\n");
}

}  // namespace mbf::io
