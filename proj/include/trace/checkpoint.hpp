#pragma once

#include "trace/denoiser.hpp"
#include "trace/evaluator.hpp"

namespace trace {

// Model checkpoint: dims, f64 schedule betas, vocabulary (names, concept
// structure, f32-exact embeddings) and every parameter block by name, f32.
// save -> load -> save is byte-identical.
void save_model(const std::string& path, const DenoiserModel& m);
DenoiserModel load_model(const std::string& path);

void save_classifier(const std::string& path, const ConceptClassifier& c);
ConceptClassifier load_classifier(const std::string& path);

// FNV-1a over the raw bytes of a file, for manifests.
uint64_t file_digest(const std::string& path);

}  // namespace trace
