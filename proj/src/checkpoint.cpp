#include "usrf/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "usrf/error.hpp"

namespace usrf {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

Checkpoint make_checkpoint(std::string meta, const ParameterStore& store) {
  Checkpoint c;
  c.meta = std::move(meta);
  for (const Parameter* p : store.all()) c.params.push_back({p->name, p->value});
  return c;
}

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  if (ckpt.meta.find('\n') != std::string::npos) throw InputError("checkpoint meta must be a single line");
  out << "usrfnet-checkpoint " << kCheckpointVersion << '\n';
  out << "meta " << ckpt.meta << '\n';
  out << "params " << ckpt.params.size() << '\n';
  for (const auto& p : ckpt.params) {
    out << p.name << ' ' << p.value.rows() << ' ' << p.value.cols() << '\n';
    for (Index r = 0; r < p.value.rows(); ++r) {
      for (Index c = 0; c < p.value.cols(); ++c) {
        if (c) out << ' ';
        out << format_double(p.value(r, c));
      }
      out << '\n';
    }
  }
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open checkpoint for writing: " + path);
  write_checkpoint(out, ckpt);
  if (!out) throw InputError("failed writing checkpoint: " + path);
}

Checkpoint read_checkpoint(std::istream& in) {
  Checkpoint c;
  std::string line;
  std::size_t line_no = 0;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw ParseError(line_no + 1, std::string("unexpected end of checkpoint, expected ") + what);
    ++line_no;
  };

  next("header");
  {
    std::istringstream ss(line);
    std::string magic;
    int version = 0;
    if (!(ss >> magic >> version) || magic != "usrfnet-checkpoint") throw ParseError(line_no, "not a checkpoint file");
    if (version != kCheckpointVersion)
      throw ArtifactMismatchError("unsupported checkpoint version " + std::to_string(version));
  }
  next("meta");
  if (line.rfind("meta ", 0) != 0) throw ParseError(line_no, "expected 'meta <json>'");
  c.meta = line.substr(5);
  next("params");
  std::size_t count = 0;
  {
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key >> count) || key != "params") throw ParseError(line_no, "expected 'params <count>'");
  }
  for (std::size_t i = 0; i < count; ++i) {
    next("parameter header");
    NamedMatrix p;
    Index rows = 0, cols = 0;
    std::istringstream hs(line);
    if (!(hs >> p.name >> rows >> cols) || rows < 0 || cols < 0)
      throw ParseError(line_no, "bad parameter header: " + line);
    p.value.resize(rows, cols);
    for (Index r = 0; r < rows; ++r) {
      next("parameter values");
      std::istringstream vs(line);
      for (Index col = 0; col < cols; ++col) {
        std::string tok;
        if (!(vs >> tok)) throw ParseError(line_no, "too few values for " + p.name);
        try {
          std::size_t used = 0;
          p.value(r, col) = std::stod(tok, &used);
          if (used != tok.size()) throw std::invalid_argument(tok);
        } catch (const std::exception&) {
          throw ParseError(line_no, "bad number '" + tok + "'");
        }
      }
      std::string extra;
      if (vs >> extra) throw ParseError(line_no, "too many values for " + p.name);
    }
    c.params.push_back(std::move(p));
  }
  return c;
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path);
  return read_checkpoint(in);
}

void load_parameters(const Checkpoint& ckpt, ParameterStore& store) {
  auto params = store.all();
  if (params.size() != ckpt.params.size())
    throw ArtifactMismatchError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                                std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& src = ckpt.params[i];
    if (src.name != params[i]->name)
      throw ArtifactMismatchError("checkpoint parameter '" + src.name + "' where model expects '" + params[i]->name + "'");
    if (src.value.rows() != params[i]->value.rows() || src.value.cols() != params[i]->value.cols())
      throw ArtifactMismatchError("shape mismatch for " + src.name + ": " + shape_string(src.value) + " vs " +
                                  shape_string(params[i]->value));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = ckpt.params[i].value;
}

}  // namespace usrf
