#include "seqpo/inspect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "seqpo/errors.hpp"
#include "seqpo/objectives.hpp"
#include "seqpo/trainer.hpp"

namespace seqpo {

using nlohmann::json;

namespace {

constexpr double kEdges[] = {0.5, 0.8, 0.95, 0.99, 1.01, 1.05, 1.25, 2.0};
constexpr int kBuckets = 9;

int bucket_of(double ratio) {
  for (int b = 0; b < kBuckets - 1; ++b)
    if (ratio < kEdges[b]) return b;
  return kBuckets - 1;
}

std::string bucket_label(int b) {
  std::ostringstream os;
  if (b == 0) {
    os << "        < " << kEdges[0];
  } else if (b == kBuckets - 1) {
    os << "       >= " << kEdges[kBuckets - 2];
  } else {
    os << "[" << kEdges[b - 1] << ", " << kEdges[b] << ")";
  }
  return os.str();
}

struct MinibatchTally {
  std::size_t tokens = 0, clipped_tokens = 0;
  std::size_t sequences = 0, clipped_sequences = 0;
};

bool clip_binds(double ratio, double advantage, double lo, double hi) {
  if (advantage > 0.0) return ratio > hi;
  if (advantage < 0.0) return ratio < lo;
  return false;
}

}  // namespace

InspectReport inspect_rollout_log(const std::string& log_path,
                                  const std::string& metrics_path) {
  std::ifstream log(log_path);
  if (!log) throw IoError("cannot open rollout log " + log_path);

  InspectReport report;
  bool have_header = false;
  Algorithm algorithm = Algorithm::Gspo;
  double clip_lo = 0.0, clip_hi = 0.0;
  bool sequence_level = true;

  std::vector<std::size_t> token_hist(kBuckets, 0);
  std::vector<std::size_t> seq_hist(kBuckets, 0);
  std::map<std::pair<int, int>, MinibatchTally> tallies;

  double min_ratio = std::numeric_limits<double>::infinity();
  double max_ratio = -std::numeric_limits<double>::infinity();
  std::size_t clipped_tokens = 0, clipped_sequences = 0;

  std::string line;
  int line_number = 0;
  while (std::getline(log, line)) {
    ++line_number;
    ++report.total_lines;
    if (line.empty()) continue;
    json record;
    try {
      record = json::parse(line);
      const std::string type = record.at("type").get<std::string>();
      if (type == "header") {
        algorithm = algorithm_from_string(
            record.at("algorithm").get<std::string>());
        const json& clip = record.at("clip");
        clip_lo = 1.0 - clip.at("left").get<double>();
        clip_hi = 1.0 + clip.at("right").get<double>();
        sequence_level =
            clip.at("level").get<std::string>() == "sequence";
        have_header = true;
        continue;
      }
      if (type != "rollout") continue;
      if (!have_header)
        throw StateError("rollout record before the header line");

      const int step = record.at("step").get<int>();
      const int minibatch = record.at("minibatch").get<int>();
      MinibatchTally& tally = tallies[{step, minibatch}];

      for (const json& response : record.at("responses")) {
        const auto old_lp = response.at("old_log_probs").get<std::vector<double>>();
        const auto new_lp = response.at("new_log_probs").get<std::vector<double>>();
        const double advantage = response.at("advantage").get<double>();
        if (old_lp.size() != new_lp.size() || old_lp.empty())
          throw InputError("response log-prob vectors are inconsistent");

        double log_sum = 0.0;
        std::size_t clipped_here = 0;
        for (std::size_t t = 0; t < old_lp.size(); ++t) {
          const double w = std::exp(new_lp[t] - old_lp[t]);
          log_sum += new_lp[t] - old_lp[t];
          ++token_hist[static_cast<std::size_t>(bucket_of(w))];
          min_ratio = std::min(min_ratio, w);
          max_ratio = std::max(max_ratio, w);
          if (!sequence_level && clip_binds(w, advantage, clip_lo, clip_hi))
            ++clipped_here;
        }
        const double s =
            std::exp(log_sum / static_cast<double>(old_lp.size()));
        ++seq_hist[static_cast<std::size_t>(bucket_of(s))];

        bool seq_clipped = false;
        if (sequence_level) {
          seq_clipped = clip_binds(s, advantage, clip_lo, clip_hi);
          clipped_here = seq_clipped ? old_lp.size() : 0;
        } else {
          seq_clipped = clipped_here == old_lp.size();
        }

        report.responses += 1;
        report.tokens += old_lp.size();
        clipped_tokens += clipped_here;
        clipped_sequences += seq_clipped ? 1 : 0;
        tally.tokens += old_lp.size();
        tally.clipped_tokens += clipped_here;
        tally.sequences += 1;
        tally.clipped_sequences += seq_clipped ? 1 : 0;
      }
      ++report.rollout_records;
    } catch (const std::exception&) {
      report.corrupt_lines.push_back(line_number);
    }
  }
  (void)algorithm;

  report.clip_fraction_tokens =
      report.tokens == 0
          ? 0.0
          : static_cast<double>(clipped_tokens) / report.tokens;
  report.clip_fraction_sequences =
      report.responses == 0
          ? 0.0
          : static_cast<double>(clipped_sequences) / report.responses;
  report.min_token_ratio = report.tokens == 0 ? 0.0 : min_ratio;
  report.max_token_ratio = report.tokens == 0 ? 0.0 : max_ratio;
  for (int b = 0; b < kBuckets; ++b) {
    report.token_ratio_histogram.emplace_back(bucket_label(b), token_hist[b]);
    report.seq_ratio_histogram.emplace_back(bucket_label(b), seq_hist[b]);
  }

  if (!metrics_path.empty()) {
    std::ifstream metrics(metrics_path);
    if (!metrics) throw IoError("cannot open metrics file " + metrics_path);
    report.compared_metrics = true;
    std::string metrics_line;
    int metrics_line_number = 0;
    while (std::getline(metrics, metrics_line)) {
      ++metrics_line_number;
      if (metrics_line.empty()) continue;
      try {
        const json record = json::parse(metrics_line);
        const int step = record.at("step").get<int>();
        const int minibatch = record.at("minibatch").get<int>();
        const auto it = tallies.find({step, minibatch});
        if (it == tallies.end()) {
          ++report.metrics_mismatches;
          report.mismatch_details.push_back(
              "metrics record step " + std::to_string(step) + " minibatch " +
              std::to_string(minibatch) + " has no rollout records");
          continue;
        }
        const MinibatchTally& tally = it->second;
        const double tokens_fraction =
            tally.tokens == 0
                ? 0.0
                : static_cast<double>(tally.clipped_tokens) / tally.tokens;
        const double seq_fraction =
            tally.sequences == 0
                ? 0.0
                : static_cast<double>(tally.clipped_sequences) / tally.sequences;
        const double recorded_tokens =
            record.at("clip_fraction_tokens").get<double>();
        const double recorded_seq =
            record.at("clip_fraction_sequences").get<double>();
        if (std::abs(tokens_fraction - recorded_tokens) > 1e-12 ||
            std::abs(seq_fraction - recorded_seq) > 1e-12) {
          ++report.metrics_mismatches;
          std::ostringstream detail;
          detail << "step " << step << " minibatch " << minibatch
                 << ": recomputed clip fractions (" << tokens_fraction << ", "
                 << seq_fraction << ") != recorded (" << recorded_tokens
                 << ", " << recorded_seq << ")";
          report.mismatch_details.push_back(detail.str());
        }
      } catch (const json::exception&) {
        ++report.metrics_mismatches;
        report.mismatch_details.push_back(
            "metrics line " + std::to_string(metrics_line_number) +
            " failed to parse");
      }
    }
  }

  return report;
}

std::string InspectReport::render() const {
  std::ostringstream os;
  os << "rollout records: " << rollout_records << " (" << responses
     << " responses, " << tokens << " tokens)\n";
  if (!corrupt_lines.empty()) {
    os << "parse errors: " << corrupt_lines.size() << " (lines";
    for (int line : corrupt_lines) os << " " << line;
    os << ")\n";
  }
  os << "token ratio range: [" << min_token_ratio << ", " << max_token_ratio
     << "]\n";
  os << "token ratio histogram:\n";
  for (const auto& [label, count] : token_ratio_histogram)
    os << "  " << label << " : " << count << "\n";
  os << "sequence ratio histogram:\n";
  for (const auto& [label, count] : seq_ratio_histogram)
    os << "  " << label << " : " << count << "\n";
  os << "recomputed clip fraction (tokens): " << clip_fraction_tokens << "\n";
  os << "recomputed clip fraction (sequences): " << clip_fraction_sequences
     << "\n";
  if (compared_metrics) {
    if (metrics_mismatches == 0) {
      os << "metrics cross-check: OK (recomputed fractions match the recorded "
            "stream)\n";
    } else {
      os << "metrics cross-check: " << metrics_mismatches << " mismatches\n";
      for (const std::string& detail : mismatch_details)
        os << "  " << detail << "\n";
    }
  }
  return os.str();
}

}  // namespace seqpo
