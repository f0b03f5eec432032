// Copyright (C) 2026 The busaug Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "busaug/data.hpp"
#include "busaug/eval.hpp"
#include "busaug/image.hpp"
#include "json.hpp"

namespace busaug::report {

struct RenderedReport {
  std::string markdown;
  nlohmann::json json;
};

/// Five-row results table in arm order (baseline, sd, sd_img2img, sd_ti,
/// sd_ti_img2img). Metrics print with 3 decimals and FID with 2; the best
/// displayed value per column is bold, ties jointly. Baseline FID is "-".
/// Throws DataError unless given exactly the five arms in order.
RenderedReport render_report(const std::vector<eval::MetricsReport>& reports);

/// One grid column: a method name and its images per label (first image is shown).
struct GridColumn {
  std::string name;
  std::map<data::ClassLabel, std::vector<Image>> cells;
};

/// Composite with one row per label and one column per method, names burned
/// into the margins. Throws DataError naming an empty (label, method) cell.
Image compose_grid(const std::vector<GridColumn>& columns, const std::vector<data::ClassLabel>& rows);
void export_grid(const std::vector<GridColumn>& columns, const std::vector<data::ClassLabel>& rows,
                 const std::filesystem::path& out);

/// Draws upper-case text with a 5x7 bitmap font (unknown glyphs render blank).
void draw_text(Image& canvas, int x, int y, const std::string& text, double value = 1.0);
int text_width(const std::string& text);

}  // namespace busaug::report
