#pragma once
#include <cstdint>
#include <string>

#include <json.hpp>

namespace mm::cli {

struct VerifyOptions {
    std::uint64_t seed = 0;
    int workers = 1;
    bool inject_anchor_bug = false;  // negative control for the automata suite
};

struct SuiteResult {
    std::string suite;
    std::uint64_t checks = 0;
    std::uint64_t failures = 0;
    nlohmann::json counterexample;  // first failure, null if none
    nlohmann::json details = nlohmann::json::object();
    bool passed() const { return failures == 0; }
};

SuiteResult verify_scan(const VerifyOptions& o);
SuiteResult verify_grad(const VerifyOptions& o);
SuiteResult verify_automata(const VerifyOptions& o);
SuiteResult verify_stability(const VerifyOptions& o);
// throws std::invalid_argument for an unknown suite
SuiteResult run_suite(const std::string& name, const VerifyOptions& o);

}  // namespace mm::cli
