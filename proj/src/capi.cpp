// SPDX-License-Identifier: Apache-2.0
#include "mote.h"

#include <cstring>
#include <new>
#include <string>

#include <json.hpp>

#include "mote/harness.hpp"

namespace {

thread_local char tl_error[512] = "";

void set_error(const char* msg) {
  std::strncpy(tl_error, msg, sizeof(tl_error) - 1);
  tl_error[sizeof(tl_error) - 1] = '\0';
}

mote_status to_status(mote::errc code) {
  using mote::errc;
  switch (code) {
    case errc::ok: return MOTE_OK;
    case errc::invalid_argument: return MOTE_ERR_INVALID_ARGUMENT;
    case errc::dimension_mismatch: return MOTE_ERR_DIMENSION_MISMATCH;
    case errc::not_symmetric: return MOTE_ERR_NOT_SYMMETRIC;
    case errc::not_spd: return MOTE_ERR_NOT_SPD;
    case errc::size_guard: return MOTE_ERR_SIZE_GUARD;
    case errc::io_failure: return MOTE_ERR_IO;
    case errc::parse_failure: return MOTE_ERR_PARSE;
    case errc::verify_failure: return MOTE_ERR_VERIFY;
  }
  return MOTE_ERR_UNKNOWN;
}

template <typename F>
mote_status guarded(F&& f) {
  try {
    f();
    tl_error[0] = '\0';
    return MOTE_OK;
  } catch (const mote::Error& e) {
    set_error(e.what());
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    set_error("out of memory");
    return MOTE_ERR_UNKNOWN;
  } catch (const std::exception& e) {
    set_error(e.what());
    return MOTE_ERR_UNKNOWN;
  }
}

mote_status require_ptr(const void* p, const char* name) {
  if (p) return MOTE_OK;
  std::string msg = std::string("null pointer: ") + name;
  set_error(msg.c_str());
  return MOTE_ERR_NULL_POINTER;
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

struct mote_workspace {
  mote::Workspace ws;
};

struct mote_plan {
  mote::Manifest kv;
  mote::EditPlan plan;
};

struct mote_report {
  std::string jsonl;
  std::string table;
};

extern "C" {

const char* mote_version(void) { return "0.1.0"; }

const char* mote_status_name(mote_status status) {
  switch (status) {
    case MOTE_OK: return "ok";
    case MOTE_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case MOTE_ERR_DIMENSION_MISMATCH: return "dimension_mismatch";
    case MOTE_ERR_NOT_SYMMETRIC: return "not_symmetric";
    case MOTE_ERR_NOT_SPD: return "not_spd";
    case MOTE_ERR_SIZE_GUARD: return "size_guard";
    case MOTE_ERR_IO: return "io_failure";
    case MOTE_ERR_PARSE: return "parse_failure";
    case MOTE_ERR_VERIFY: return "verify_failure";
    case MOTE_ERR_NULL_POINTER: return "null_pointer";
    default: return "unknown";
  }
}

const char* mote_last_error(void) { return tl_error; }

void mote_string_free(char* s) { delete[] s; }

mote_status mote_generate(const char* config_text, const char* out_dir) {
  if (auto st = require_ptr(out_dir, "out_dir"); st != MOTE_OK) return st;
  return guarded([&] {
    const mote::Manifest kv =
        mote::parse_manifest_text(config_text ? std::string(config_text) : std::string());
    mote::cmd_generate(mote::GenerateConfig::from_manifest(kv), out_dir);
  });
}

mote_status mote_workspace_open(const char* dir, mote_workspace** out) {
  if (auto st = require_ptr(dir, "dir"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  *out = nullptr;
  return guarded([&] { *out = new mote_workspace{mote::load_workspace(dir)}; });
}

void mote_workspace_close(mote_workspace* ws) { delete ws; }

mote_status mote_workspace_info(const mote_workspace* ws, char** json_out) {
  if (auto st = require_ptr(ws, "ws"); st != MOTE_OK) return st;
  if (auto st = require_ptr(json_out, "json_out"); st != MOTE_OK) return st;
  return guarded([&] {
    const mote::GenerateConfig& c = ws->ws.config;
    nlohmann::json info{{"layers", c.layers},
                        {"experts", c.experts},
                        {"top_k", c.top_k},
                        {"d_model", c.d_model},
                        {"d_hidden", c.d_hidden},
                        {"facts", c.facts},
                        {"preservation_samples", c.preservation_samples},
                        {"seed", c.seed},
                        {"layout", mote::to_string(c.layout)},
                        {"activation", mote::to_string(c.activation)}};
    *json_out = dup_string(info.dump());
  });
}

mote_status mote_plan_parse(const char* text, mote_plan** out) {
  if (auto st = require_ptr(text, "text"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  *out = nullptr;
  return guarded([&] {
    auto kv = mote::parse_manifest_text(text);
    auto plan = mote::plan_from_manifest(kv);
    *out = new mote_plan{std::move(kv), std::move(plan)};
  });
}

mote_status mote_plan_load(const char* path, mote_plan** out) {
  if (auto st = require_ptr(path, "path"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  *out = nullptr;
  return guarded([&] {
    auto kv = mote::read_manifest(path);
    auto plan = mote::plan_from_manifest(kv);
    *out = new mote_plan{std::move(kv), std::move(plan)};
  });
}

mote_status mote_plan_set(mote_plan* plan, const char* key, const char* value) {
  if (auto st = require_ptr(plan, "plan"); st != MOTE_OK) return st;
  if (auto st = require_ptr(key, "key"); st != MOTE_OK) return st;
  if (auto st = require_ptr(value, "value"); st != MOTE_OK) return st;
  return guarded([&] {
    mote::Manifest kv = plan->kv;
    kv[key] = value;
    plan->plan = mote::plan_from_manifest(kv);  // validates before committing
    plan->kv = std::move(kv);
  });
}

void mote_plan_free(mote_plan* plan) { delete plan; }

mote_status mote_edit(mote_workspace* ws, const mote_plan* plan, const char* out_dir,
                      mote_report** out) {
  if (auto st = require_ptr(ws, "ws"); st != MOTE_OK) return st;
  if (auto st = require_ptr(plan, "plan"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  *out = nullptr;
  return guarded([&] {
    const mote::RunReport report =
        mote::cmd_edit(plan->plan, ws->ws, out_dir ? std::string(out_dir) : std::string());
    *out = new mote_report{report.to_jsonl(), report.to_table()};
  });
}

mote_status mote_verify(const char* config_text, int* breached, mote_report** out) {
  if (auto st = require_ptr(breached, "breached"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  *out = nullptr;
  *breached = 1;
  return guarded([&] {
    const mote::Manifest kv =
        mote::parse_manifest_text(config_text ? std::string(config_text) : std::string());
    const mote::VerifyReport report = mote::cmd_verify(mote::VerifyConfig::from_manifest(kv));
    *breached = report.all_pass ? 0 : 1;
    *out = new mote_report{report.to_jsonl(), report.to_table()};
  });
}

mote_status mote_bench(const char* config_text, mote_report** out) {
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  *out = nullptr;
  return guarded([&] {
    const mote::Manifest kv =
        mote::parse_manifest_text(config_text ? std::string(config_text) : std::string());
    const mote::BenchReport report = mote::cmd_bench(mote::BenchmarkGrid::from_manifest(kv));
    *out = new mote_report{report.to_jsonl(), report.to_table()};
  });
}

mote_status mote_report_jsonl(const mote_report* report, char** out) {
  if (auto st = require_ptr(report, "report"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  return guarded([&] { *out = dup_string(report->jsonl); });
}

mote_status mote_report_table(const mote_report* report, char** out) {
  if (auto st = require_ptr(report, "report"); st != MOTE_OK) return st;
  if (auto st = require_ptr(out, "out"); st != MOTE_OK) return st;
  return guarded([&] { *out = dup_string(report->table); });
}

void mote_report_free(mote_report* report) { delete report; }

}  // extern "C"
