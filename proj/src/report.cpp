// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#include "busaug/report.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <optional>

#include "busaug/error.hpp"
#include "busaug/pipeline.hpp"

namespace busaug::report {

namespace {

std::string fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

struct Column {
  const char* name;
  const char* arrow;
  bool lower_is_better;
  int decimals;
  std::optional<double> (*get)(const eval::MetricsReport&);
};

const std::array<Column, 5> kColumns = {{
    {"Accuracy", "↑", false, 3, [](const eval::MetricsReport& r) -> std::optional<double> { return r.accuracy; }},
    {"F1-Score", "↑", false, 3, [](const eval::MetricsReport& r) -> std::optional<double> { return r.f1_macro; }},
    {"AUC-ROC", "↑", false, 3,
     [](const eval::MetricsReport& r) -> std::optional<double> { return r.auc_roc_ovr_macro; }},
    {"PPV", "↑", false, 3, [](const eval::MetricsReport& r) -> std::optional<double> { return r.ppv_macro; }},
    {"FID", "↓", true, 2, [](const eval::MetricsReport& r) -> std::optional<double> { return r.fid; }},
}};

}  // namespace

RenderedReport render_report(const std::vector<eval::MetricsReport>& reports) {
  using pipeline::kAllArms;
  if (reports.size() != kAllArms.size()) {
    throw DataError("results table needs exactly 5 arm reports, got " + std::to_string(reports.size()));
  }
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& meta = reports[i].metadata;
    const std::string expected(pipeline::to_string(kAllArms[i]));
    if (meta.contains("arm") && meta.at("arm").get<std::string>() != expected) {
      throw DataError("report " + std::to_string(i) + " is for arm '" + meta.at("arm").get<std::string>() +
                      "', expected '" + expected + "'");
    }
  }

  // cells[row][col] as displayed; best marks compare the displayed strings' values.
  std::vector<std::array<std::optional<std::string>, kColumns.size()>> cells(reports.size());
  std::array<std::optional<double>, kColumns.size()> best{};
  for (std::size_t c = 0; c < kColumns.size(); ++c) {
    for (std::size_t r = 0; r < reports.size(); ++r) {
      const bool hidden = kColumns[c].lower_is_better && kAllArms[r] == pipeline::ExperimentArm::kBaseline;
      const auto v = kColumns[c].get(reports[r]);
      if (hidden || !v) continue;
      cells[r][c] = fixed(*v, kColumns[c].decimals);
      const double shown = std::stod(*cells[r][c]);
      if (!best[c] || (kColumns[c].lower_is_better ? shown < *best[c] : shown > *best[c])) best[c] = shown;
    }
  }

  std::string md = "| Components |";
  for (const auto& col : kColumns) md += std::string(" ") + col.name + " " + col.arrow + " |";
  md += "\n|---|";
  for (std::size_t c = 0; c < kColumns.size(); ++c) md += "---|";
  md += "\n";

  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < reports.size(); ++r) {
    md += std::string("| ") + std::string(pipeline::arm_title(kAllArms[r])) + " |";
    nlohmann::json row;
    row["arm"] = pipeline::to_string(kAllArms[r]);
    row["title"] = pipeline::arm_title(kAllArms[r]);
    nlohmann::json marked = nlohmann::json::array();
    for (std::size_t c = 0; c < kColumns.size(); ++c) {
      if (!cells[r][c]) {
        md += " - |";
        row[kColumns[c].name] = nullptr;
        continue;
      }
      const bool is_best = std::stod(*cells[r][c]) == *best[c];
      md += is_best ? " **" + *cells[r][c] + "** |" : " " + *cells[r][c] + " |";
      row[kColumns[c].name] = *kColumns[c].get(reports[r]);
      if (is_best) marked.push_back(kColumns[c].name);
    }
    md += "\n";
    row["Recall"] = reports[r].recall_macro;
    row["best"] = marked;
    rows.push_back(row);
  }

  RenderedReport out;
  out.markdown = md;
  out.json["columns"] = {"Accuracy", "F1-Score", "AUC-ROC", "PPV", "FID"};
  out.json["rows"] = rows;
  out.json["fid_real_set"] = "train";
  return out;
}

// Grid ----------------------------------------------------------------------------------------

namespace {

/// 5x7 glyphs, one byte per row, bit 4 = leftmost column.
struct Glyph {
  char c;
  std::array<std::uint8_t, 7> rows;
};

constexpr Glyph kFont[] = {
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}}, {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}}, {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}},
};

const Glyph* find_glyph(char c) {
  const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const auto& g : kFont)
    if (g.c == up) return &g;
  return nullptr;
}

constexpr int kGlyphAdvance = 6;
constexpr int kGlyphHeight = 7;
constexpr int kGap = 2;

}  // namespace

int text_width(const std::string& text) {
  return text.empty() ? 0 : static_cast<int>(text.size()) * kGlyphAdvance - 1;
}

void draw_text(Image& canvas, int x, int y, const std::string& text, double value) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const Glyph* g = find_glyph(text[i]);
    if (!g) continue;
    const int gx = x + static_cast<int>(i) * kGlyphAdvance;
    for (int r = 0; r < kGlyphHeight; ++r) {
      for (int b = 0; b < 5; ++b) {
        if (!(g->rows[r] & (0x10 >> b))) continue;
        const int px = gx + b;
        const int py = y + r;
        if (px >= 0 && py >= 0 && px < canvas.width && py < canvas.height) canvas.at(py, px) = value;
      }
    }
  }
}

Image compose_grid(const std::vector<GridColumn>& columns, const std::vector<data::ClassLabel>& rows) {
  if (columns.empty() || rows.empty()) throw DataError("grid needs at least one row and one column");
  int cell = 0;
  for (const auto& col : columns) {
    for (data::ClassLabel label : rows) {
      auto it = col.cells.find(label);
      if (it == col.cells.end() || it->second.empty()) {
        throw DataError("grid cell (" + std::string(data::to_string(label)) + ", " + col.name + ") is empty");
      }
      const Image& im = it->second.front();
      if (im.height != im.width) throw DataError("grid images must be square");
      if (cell == 0) cell = im.height;
      if (im.height != cell) throw DataError("grid images must share one size");
    }
  }
  int label_w = 0;
  for (data::ClassLabel label : rows) label_w = std::max(label_w, text_width(std::string(data::to_string(label))));
  int col_w = cell;
  for (const auto& col : columns) col_w = std::max(col_w, text_width(col.name));
  const int left = label_w + 2 * kGap;
  const int top = kGlyphHeight + 2 * kGap;
  const int width = left + static_cast<int>(columns.size()) * (col_w + kGap);
  const int height = top + static_cast<int>(rows.size()) * (cell + kGap);
  Image canvas(height, width, -1.0);

  for (std::size_t c = 0; c < columns.size(); ++c) {
    const int x0 = left + static_cast<int>(c) * (col_w + kGap);
    draw_text(canvas, x0 + (col_w - text_width(columns[c].name)) / 2, kGap, columns[c].name);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const Image& im = columns[c].cells.at(rows[r]).front();
      const int y0 = top + static_cast<int>(r) * (cell + kGap);
      const int xo = x0 + (col_w - cell) / 2;
      for (int y = 0; y < cell; ++y)
        for (int x = 0; x < cell; ++x) canvas.at(y0 + y, xo + x) = im.at(y, x);
    }
  }
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const int y0 = top + static_cast<int>(r) * (cell + kGap);
    draw_text(canvas, kGap, y0 + (cell - kGlyphHeight) / 2, std::string(data::to_string(rows[r])));
  }
  return canvas;
}

void export_grid(const std::vector<GridColumn>& columns, const std::vector<data::ClassLabel>& rows,
                 const std::filesystem::path& out) {
  write_png(out, compose_grid(columns, rows));
}

}  // namespace busaug::report
