#pragma once

// Verbatim prompt templates used by the attacks, the refinement filter and
// the judge protocol. Slots are filled by the render helpers; the fixed text
// around each slot must not change.

#include <array>
#include <string>
#include <string_view>

namespace inv2a::templates {

inline constexpr std::string_view kRewritePrefix = "Rewrite the following sentence while keeping the same semantics: ";

inline std::string render_rewrite(std::string_view output) {
  std::string s(kRewritePrefix);
  s += output;
  return s;
}

inline constexpr std::string_view kJudgeQuestion = "Are prompt A and prompt B likely to produce similar outputs?";

inline std::string render_judge(std::string_view prompt_a, std::string_view prompt_b) {
  std::string s(kJudgeQuestion);
  s += "\nPrompt A: ";
  s += prompt_a;
  s += " Prompt B: ";
  s += prompt_b;
  s += "\nPlease answer YES or NO. Answer:";
  return s;
}

inline constexpr std::string_view kFewShotHeader =
    "Given the predicted outputs from a language model, please predict what the input was.\n"
    "Please follow the shots and don't output anything except the predicted input. Here are some shots:\n";

inline constexpr std::string_view kFewShotTail = "here is the predicted output: ";

}  // namespace inv2a::templates
