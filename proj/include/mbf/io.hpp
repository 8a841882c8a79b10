#pragma once

// On-disk formats.
//
// Dataset directory:
//   manifest.json        format_version, per-patient grid, file names and
//                        generation spec
//   <id>.pkc             "PKC1" then little-endian float64: AIF, then the
//                        masked tissue curves in row-major mask order
//   <id>_mask.txt        one text row of 0/1 per grid row
//   <id>_truth.csv       x,y,fp,ps,vp,ve,delay per masked voxel
//
// Map files are CSV grids (`nan` outside the mask) below a header row
// naming the patient and units. Weights and reports are JSON.

#include <filesystem>
#include <string>
#include <vector>

#include "mbf/cnn.hpp"
#include "mbf/maps.hpp"
#include "mbf/phantom.hpp"
#include "mbf/pipeline.hpp"

namespace mbf::io {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

void write_dataset(const PhantomDataset& dataset, const fs::path& dir);
PhantomDataset read_dataset(const fs::path& dir);

void write_map(const MbfMap& map, const fs::path& file);
MbfMap read_map(const fs::path& file);
std::string map_filename(const std::string& patient_id);  // "<id>_mbf.csv"

// All maps in `dir`, one file per patient id.
void write_maps(const std::vector<MbfMap>& maps, const fs::path& dir);
std::vector<MbfMap> read_maps(const fs::path& dir, const std::vector<std::string>& ids);

void write_weights(const NetworkWeights& weights, const fs::path& file);
NetworkWeights read_weights(const fs::path& file);

void write_history(const std::vector<EpochRecord>& history, const fs::path& file);

void write_report(const EvalReport& report, const fs::path& file);
void write_timing(const Timing& timing, const fs::path& file);

// Shortest decimal text that parses back to the identical double.
std::string format_double(double v);
double parse_double(const std::string& text, const std::string& where);

// Whole-file helpers; both throw Io errors naming the path.
std::string read_text(const fs::path& file);
void write_text(const fs::path& file, const std::string& text);

}  // namespace mbf::io
