#pragma once

#include <charconv>
#include <fstream>
#include <string>
#include <vector>

#include "amg/cost_model.hpp"
#include "amg/criteria.hpp"
#include "amg/errors.hpp"

namespace amg {

// Shortest round-trip decimal form, so identical values always render as
// identical bytes.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("short write to " + path);
}

inline std::string scores_csv(const std::vector<ImportanceScore>& scores) {
  std::string out = "kind,layer,unit,raw,weighted\n";
  for (const auto& s : scores) {
    out += unit_kind_name(s.kind);
    out += ',';
    out += std::to_string(s.layer);
    out += ',';
    out += std::to_string(s.unit_id);
    out += ',';
    out += format_double(s.raw);
    out += ',';
    out += format_double(s.weighted);
    out += '\n';
  }
  return out;
}

// Calibration-averaged maps, one value per cell. Heads carry their original
// identity and columns the absolute key/value token index, so exports stay
// comparable across pruned variants of the same model.
inline std::string heatmap_csv(const AttentionCapture& cap) {
  cap.require_maps();
  std::string out = "layer,head,row,col,value\n";
  for (int l = 0; l < cap.layer_count(); ++l) {
    const int heads = cap.heads[static_cast<std::size_t>(l)];
    const int rows = cap.tokens;
    const auto& kv = cap.kv_indices[static_cast<std::size_t>(l)];
    const int cols = static_cast<int>(kv.size());
    const auto& mean = cap.attn_mean[static_cast<std::size_t>(l)].data();
    for (int h = 0; h < heads; ++h) {
      const int head_id = cap.head_ids[static_cast<std::size_t>(l)][static_cast<std::size_t>(h)];
      for (int q = 0; q < rows; ++q) {
        for (int j = 0; j < cols; ++j) {
          const double v = mean[static_cast<std::size_t>((h * rows + q) * cols + j)];
          out += std::to_string(l);
          out += ',';
          out += std::to_string(head_id);
          out += ',';
          out += std::to_string(q);
          out += ',';
          out += std::to_string(kv[static_cast<std::size_t>(j)]);
          out += ',';
          out += format_double(v);
          out += '\n';
        }
      }
    }
  }
  return out;
}

inline std::string cost_csv(const CostReport& report) {
  std::string out = "layer,heads,kv_tokens,msa_params,msa_flops_analytical";
  if (report.instrumented) out += ",qkv_macs,attention_macs,output_macs,msa_flops_instrumented";
  out += "\n";
  for (const auto& l : report.layers) {
    out += std::to_string(l.layer);
    out += ',';
    out += std::to_string(l.heads);
    out += ',';
    out += std::to_string(l.kv_tokens);
    out += ',';
    out += std::to_string(l.msa_params);
    out += ',';
    out += std::to_string(l.msa_flops_analytical);
    if (report.instrumented) {
      out += ',';
      out += std::to_string(l.qkv_macs);
      out += ',';
      out += std::to_string(l.attention_macs);
      out += ',';
      out += std::to_string(l.output_macs);
      out += ',';
      out += std::to_string(l.msa_flops_instrumented);
    }
    out += '\n';
  }
  return out;
}

}  // namespace amg
