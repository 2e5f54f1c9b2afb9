#pragma once

#include <string>

#include "mvrag/mvnet.hpp"

namespace mvrag {

inline constexpr int kCheckpointVersion = 1;

// Single-file checkpoint: magic, JSON header {format_version, config echo,
// parameter manifest with name/shape/frozen/offset/checksum}, then raw
// little-endian float64 payload. Covers denoiser + resampler + encoders.
void save_checkpoint(MvRagModel& model, const std::string& path);

// Loads parameters by name, restoring frozen flags and verifying the
// per-parameter checksums. A base checkpoint (no retrieval projections)
// loaded into a model built with retrieval leaves those projections at their
// documented init (value zero, key copied from the text key projection).
// Throws on version mismatch, truncation, manifest/offset inconsistency, or
// checksum failure.
void load_checkpoint(MvRagModel& model, const std::string& path);

// Convenience: construct a model matching the checkpoint's config. The
// with_retrieval flag controls whether retrieval projections exist (they are
// created and policy-initialized when the file lacks them).
MvRagModel load_model(const std::string& path, bool with_retrieval);

}  // namespace mvrag
