#pragma once

#include <map>
#include <string>
#include <vector>

#include "lomt/model.hpp"
#include "lomt/sparsity.hpp"
#include "lomt/train.hpp"

namespace lomt {

/// One JSON object per epoch record, newline-terminated.
std::string history_to_jsonl(const History& history);

/// Little-endian binary parameter dump (ids, roles, shapes, f64 data).
void write_checkpoint(const std::string& path, const ModelGraph& model);

/// Loads checkpoint values into matching parameters by id; throws when the
/// model lacks a stored parameter or shapes differ.
void load_checkpoint(const std::string& path, ModelGraph& model);

std::string pattern_to_json(const SparsityPattern& pattern);
SparsityPattern pattern_from_json_file(const std::string& path);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace lomt
