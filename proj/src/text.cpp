#include "semprobe/text.hpp"

#include <cctype>
#include <sstream>

namespace semprobe {

std::string to_lower(std::string_view text) {
  std::string out(text);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim(std::string_view text) {
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = text.find_last_not_of(" \t\r\n");
  return std::string(text.substr(first, last - first + 1));
}

std::vector<std::string> normalized_tokens(std::string_view text) {
  std::string cleaned;
  cleaned.reserve(text.size());
  for (char c : text) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80 && std::ispunct(u)) continue;
    cleaned.push_back(u < 0x80 ? static_cast<char>(std::tolower(u)) : c);
  }
  std::vector<std::string> tokens;
  std::istringstream in(cleaned);
  std::string tok;
  while (in >> tok)
    if (tok != "a" && tok != "an" && tok != "the") tokens.push_back(tok);
  return tokens;
}

std::string normalize_answer(std::string_view text) {
  std::string out;
  for (const auto& tok : normalized_tokens(text)) {
    if (!out.empty()) out.push_back(' ');
    out += tok;
  }
  return out;
}

}  // namespace semprobe
