#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace slam {

inline constexpr int32_t kPadId = 0;
inline constexpr int32_t kClsId = 1;
inline constexpr int32_t kMaskId = 2;
inline constexpr int32_t kUnkId = 3;
inline constexpr int32_t kFirstContentId = 4;

// Character vocabulary: four reserved specials plus 60 printable content
// symbols, 64 ids total. The generator never emits specials as content.
struct Vocabulary {
  std::string symbols;  // content characters; id = kFirstContentId + index
  std::array<int32_t, 256> char_to_id{};

  static const Vocabulary& standard() {
    static const Vocabulary v = [] {
      Vocabulary out;
      out.symbols =
          "abcdefghijklmnopqrstuvwxyz"
          "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
          "01234567";
      out.char_to_id.fill(-1);
      for (size_t i = 0; i < out.symbols.size(); ++i)
        out.char_to_id[static_cast<unsigned char>(out.symbols[i])] = kFirstContentId + static_cast<int32_t>(i);
      return out;
    }();
    return v;
  }

  int64_t size() const { return kFirstContentId + static_cast<int64_t>(symbols.size()); }

  std::vector<int32_t> tokenize(std::string_view text) const {
    std::vector<int32_t> ids;
    ids.reserve(text.size());
    for (char c : text) {
      int32_t id = char_to_id[static_cast<unsigned char>(c)];
      ids.push_back(id < 0 ? kUnkId : id);
    }
    return ids;
  }

  std::string detokenize(const std::vector<int32_t>& ids) const {
    std::string out;
    for (int32_t id : ids) {
      if (id >= kFirstContentId && id < size()) {
        out.push_back(symbols[static_cast<size_t>(id - kFirstContentId)]);
      } else {
        switch (id) {
          case kPadId: out += "<pad>"; break;
          case kClsId: out += "<cls>"; break;
          case kMaskId: out += "<mask>"; break;
          default: out += "<unk>"; break;
        }
      }
    }
    return out;
  }

  uint64_t hash() const {
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : symbols) {
      h ^= c;
      h *= 1099511628211ULL;
    }
    return h;
  }
};

}  // namespace slam
