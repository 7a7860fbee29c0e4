#include "pixproto/config_io.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

namespace pixproto {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& field, const std::string& msg) { throw ConfigError(field + ": " + msg); }

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

// Walks one JSON object, remembering which keys were consumed so leftovers
// can be reported as unknown.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_.empty() ? "config" : path_, "expected an object");
  }

  const json* take(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const std::string& key, double& out) {
    if (const json* v = take(key)) out = as_double(*v, join(path_, key));
  }
  void get(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) fail(join(path_, key), "expected a boolean");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, int& out) {
    if (const json* v = take(key)) out = static_cast<int>(as_integer(*v, join(path_, key), INT32_MIN, INT32_MAX));
  }
  void get(const std::string& key, long& out) {
    if (const json* v = take(key)) out = static_cast<long>(as_integer(*v, join(path_, key), INT64_MIN, INT64_MAX));
  }
  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<std::int64_t>() >= 0)) {
        fail(join(path_, key), "expected a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, Color& out) {
    if (const json* v = take(key)) out = as_color(*v, join(path_, key));
  }
  void get(const std::string& key, std::vector<Color>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(join(path_, key), "expected an array of [r, g, b]");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(as_color((*v)[i], join(path_, key) + "[" + std::to_string(i) + "]"));
    }
  }
  void get(const std::string& key, std::vector<int>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(join(path_, key), "expected an array of integers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) {
        out.push_back(static_cast<int>(as_integer((*v)[i], join(path_, key) + "[" + std::to_string(i) + "]", INT32_MIN, INT32_MAX)));
      }
    }
  }
  void get(const std::string& key, std::vector<std::string>& out) {
    if (const json* v = take(key)) {
      if (!v->is_array()) fail(join(path_, key), "expected an array of strings");
      out.clear();
      for (const auto& e : *v) {
        if (!e.is_string()) fail(join(path_, key), "expected an array of strings");
        out.push_back(e.get<std::string>());
      }
    }
  }
  template <class Enum>
  void get_enum(const std::string& key, Enum& out, std::initializer_list<std::pair<const char*, Enum>> names) {
    if (const json* v = take(key)) {
      std::string allowed;
      if (v->is_string()) {
        for (const auto& [name, value] : names) {
          if (v->get<std::string>() == name) {
            out = value;
            return;
          }
        }
      }
      for (const auto& [name, value] : names) allowed += std::string(allowed.empty() ? "" : ", ") + name;
      fail(join(path_, key), "expected one of: " + allowed);
    }
  }

  Reader child(const std::string& key) {
    const json* v = take(key);
    return v != nullptr ? Reader(*v, join(path_, key)) : Reader(empty_object(), join(path_, key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (seen_.count(it.key()) == 0) fail(join(path_, it.key()), "unknown key");
    }
  }

 private:
  static const json& empty_object() {
    static const json e = json::object();
    return e;
  }
  static double as_double(const json& v, const std::string& field) {
    if (!v.is_number()) fail(field, "expected a number");
    return v.get<double>();
  }
  static std::int64_t as_integer(const json& v, const std::string& field, std::int64_t lo, std::int64_t hi) {
    if (!v.is_number_integer()) fail(field, "expected an integer");
    if (v.is_number_unsigned() && v.get<std::uint64_t>() > static_cast<std::uint64_t>(INT64_MAX)) fail(field, "out of range");
    const std::int64_t x = v.get<std::int64_t>();
    if (x < lo || x > hi) fail(field, "out of range");
    return x;
  }
  static Color as_color(const json& v, const std::string& field) {
    if (!v.is_array() || v.size() != 3) fail(field, "expected [r, g, b]");
    Color c{};
    for (int i = 0; i < 3; ++i) c[i] = as_double(v[i], field);
    return c;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json color_json(const Color& c) { return json::array({c[0], c[1], c[2]}); }

json colors_json(const std::vector<Color>& cs) {
  json a = json::array();
  for (const auto& c : cs) a.push_back(color_json(c));
  return a;
}

const char* seg_labels_name(TargetSegLabels v) { return v == TargetSegLabels::kHybrid ? "hybrid" : "static"; }
const char* pooling_name(PrototypePooling v) { return v == PrototypePooling::kBatch ? "batch" : "pair"; }
const char* negatives_name(NegativeSet v) {
  return v == NegativeSet::kPresentClasses ? "present" : "all_bank_fallback";
}

}  // namespace

json config_to_json(const TrainConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["scene"] = {{"height", c.scene.height},
                {"width", c.scene.width},
                {"class_names", c.scene.class_names},
                {"colors", colors_json(c.scene.colors)},
                {"min_blobs", c.scene.min_blobs},
                {"max_blobs", c.scene.max_blobs},
                {"rare_probability", c.scene.rare_probability},
                {"texture", c.scene.texture}};
  j["shift"] = {{"global_offset", color_json(c.shift.global_offset)},
                {"class_offsets", colors_json(c.shift.class_offsets)},
                {"noise_sigma", c.shift.noise_sigma},
                {"texture_jitter", c.shift.texture_jitter}};
  j["n_source"] = c.n_source;
  j["n_target"] = c.n_target;
  j["n_eval"] = c.n_eval;
  j["encoder"] = {{"widths", c.encoder.widths}, {"strides", c.encoder.strides}};
  j["pretrain_iterations"] = c.pretrain_iterations;
  j["pretrain_lr"] = c.pretrain_lr;
  j["iterations"] = c.iterations;
  j["batch_size"] = c.batch_size;
  j["lr"] = c.lr;
  j["momentum"] = c.momentum;
  j["weight_decay"] = c.weight_decay;
  j["poly_power"] = c.poly_power;
  j["weights"] = {{"seg_source", c.weights.seg_source}, {"seg_target", c.weights.seg_target},
                  {"ent_source", c.weights.ent_source}, {"ent_target", c.weights.ent_target},
                  {"fcl", c.weights.fcl},               {"bcl", c.weights.bcl},
                  {"tau", c.weights.tau}};
  j["ema_momentum"] = c.ema_momentum;
  j["threshold"] = c.threshold;
  j["static_labels"] = {{"fraction", c.static_labels.fraction},
                        {"refresh_interval", c.static_labels.refresh_interval}};
  j["switches"] = {{"use_fcl", c.switches.use_fcl},
                   {"use_bcl", c.switches.use_bcl},
                   {"use_dynamic", c.switches.use_dynamic},
                   {"use_calibration", c.switches.use_calibration}};
  j["target_seg_labels"] = seg_labels_name(c.target_seg_labels);
  j["pooling"] = pooling_name(c.pooling);
  j["negatives"] = negatives_name(c.negatives);
  j["augment_flip"] = c.augment_flip;
  j["scale_min"] = c.scale_min;
  j["scale_max"] = c.scale_max;
  j["oversample_rare"] = c.oversample_rare;
  j["eval_interval"] = c.eval_interval;
  return j;
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  Reader r(j, "");
  r.get("seed", c.seed);
  {
    Reader s = r.child("scene");
    s.get("height", c.scene.height);
    s.get("width", c.scene.width);
    s.get("class_names", c.scene.class_names);
    s.get("colors", c.scene.colors);
    s.get("min_blobs", c.scene.min_blobs);
    s.get("max_blobs", c.scene.max_blobs);
    s.get("rare_probability", c.scene.rare_probability);
    s.get("texture", c.scene.texture);
    s.finish();
  }
  {
    Reader s = r.child("shift");
    s.get("global_offset", c.shift.global_offset);
    s.get("class_offsets", c.shift.class_offsets);
    s.get("noise_sigma", c.shift.noise_sigma);
    s.get("texture_jitter", c.shift.texture_jitter);
    s.finish();
  }
  r.get("n_source", c.n_source);
  r.get("n_target", c.n_target);
  r.get("n_eval", c.n_eval);
  {
    Reader e = r.child("encoder");
    e.get("widths", c.encoder.widths);
    e.get("strides", c.encoder.strides);
    e.finish();
  }
  r.get("pretrain_iterations", c.pretrain_iterations);
  r.get("pretrain_lr", c.pretrain_lr);
  r.get("iterations", c.iterations);
  r.get("batch_size", c.batch_size);
  r.get("lr", c.lr);
  r.get("momentum", c.momentum);
  r.get("weight_decay", c.weight_decay);
  r.get("poly_power", c.poly_power);
  {
    Reader w = r.child("weights");
    w.get("seg_source", c.weights.seg_source);
    w.get("seg_target", c.weights.seg_target);
    w.get("ent_source", c.weights.ent_source);
    w.get("ent_target", c.weights.ent_target);
    w.get("fcl", c.weights.fcl);
    w.get("bcl", c.weights.bcl);
    w.get("tau", c.weights.tau);
    w.finish();
  }
  r.get("ema_momentum", c.ema_momentum);
  r.get("threshold", c.threshold);
  {
    Reader s = r.child("static_labels");
    s.get("fraction", c.static_labels.fraction);
    s.get("refresh_interval", c.static_labels.refresh_interval);
    s.finish();
  }
  {
    Reader s = r.child("switches");
    s.get("use_fcl", c.switches.use_fcl);
    s.get("use_bcl", c.switches.use_bcl);
    s.get("use_dynamic", c.switches.use_dynamic);
    s.get("use_calibration", c.switches.use_calibration);
    s.finish();
  }
  r.get_enum("target_seg_labels", c.target_seg_labels,
             {{"hybrid", TargetSegLabels::kHybrid}, {"static", TargetSegLabels::kStatic}});
  r.get_enum("pooling", c.pooling, {{"batch", PrototypePooling::kBatch}, {"pair", PrototypePooling::kPair}});
  r.get_enum("negatives", c.negatives,
             {{"present", NegativeSet::kPresentClasses}, {"all_bank_fallback", NegativeSet::kAllClassesBankFallback}});
  r.get("augment_flip", c.augment_flip);
  r.get("scale_min", c.scale_min);
  r.get("scale_max", c.scale_max);
  r.get("oversample_rare", c.oversample_rare);
  r.get("eval_interval", c.eval_interval);
  r.finish();

  c.encoder.classes = c.scene.classes();
  c.validate();
  return c;
}

TrainConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: malformed JSON: ") + e.what());
  }
  return config_from_json(j);
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const TrainConfig& cfg) { return config_to_json(cfg).dump(2); }

std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string config_hash(const TrainConfig& cfg) {
  const std::string canon = config_to_json(cfg).dump();
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(canon.data(), canon.size())));
  return buf;
}

}  // namespace pixproto
