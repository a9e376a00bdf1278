#include "mllmreid/prompts.hpp"

namespace mllmreid::text {

std::string image_continuation_instruction() {
  constexpr std::string_view human = "###Human:";
  constexpr std::string_view assistant = "###Assistant:";
  std::string_view t = kImageContinuationTemplate;
  const std::size_t begin = t.find(human) + human.size();
  const std::size_t end = t.find(assistant);
  std::string_view inner = t.substr(begin, end - begin);
  while (!inner.empty() && (inner.front() == ' ' || inner.front() == '\n')) inner.remove_prefix(1);
  while (!inner.empty() && (inner.back() == ' ' || inner.back() == '\n')) inner.remove_suffix(1);
  return std::string(inner);
}

}  // namespace mllmreid::text
