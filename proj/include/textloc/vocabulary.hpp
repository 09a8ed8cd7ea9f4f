#pragma once

// Fixed word-level vocabulary of the toy text encoder.

#include <array>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "textloc/errors.hpp"

namespace textloc {

class Vocabulary {
 public:
  static constexpr int kBos = 0;
  static constexpr int kEos = 1;
  static constexpr int kUnk = 2;

  // Rare surfaces reserved for identifier tokens.
  static constexpr std::array<std::string_view, 8> kIdentifierSlots = {"sks", "ktn", "pll", "zwx",
                                                                      "qrv", "bnj", "dtx", "fmw"};

  // Embedding of new identifiers is copied from this word by default.
  static constexpr std::string_view kNeutralNoun = "object";

  static const Vocabulary& toy() {
    static const Vocabulary v = build_toy();
    return v;
  }

  explicit Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
    for (std::size_t i = 0; i < words_.size(); ++i) {
      if (!ids_.emplace(words_[i], static_cast<int>(i)).second) {
        throw ConfigurationError("duplicate vocabulary entry '" + words_[i] + "'");
      }
    }
  }

  int size() const { return static_cast<int>(words_.size()); }
  bool contains(const std::string& word) const { return ids_.count(word) > 0; }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? kUnk : it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || id >= size()) throw ArgumentError("vocabulary id " + std::to_string(id) + " out of range");
    return words_[static_cast<std::size_t>(id)];
  }

  bool is_identifier_slot(const std::string& word) const {
    for (std::string_view s : kIdentifierSlots) {
      if (s == word) return true;
    }
    return false;
  }

 private:
  static Vocabulary build_toy() {
    std::vector<std::string> words = {"<bos>", "<eos>", "<unk>"};
    for (std::string_view s : kIdentifierSlots) words.emplace_back(s);
    static constexpr std::string_view kWords[] = {
        // function words
        "a", "an", "the", "of", "and", "or", "in", "on", "at", "with", "under", "over", "above", "below", "near",
        "by", "for", "from", "to", "into", "onto", "top", "front", "behind", "beside", "between", "inside",
        "outside", "next", "its", "is", "are", "it", "this", "that", "some", "two", "one", "three", "many",
        "few", "very", "background", "foreground", "view", "style", "shot", "close", "up", "side", "left",
        "right", "middle", "center", "corner", "edge",
        // image and style words
        "photo", "picture", "image", "painting", "drawing", "sketch", "render", "rendering", "illustration",
        "watercolor", "oil", "pencil", "cartoon", "digital", "art", "artwork", "poster", "portrait", "photograph",
        "realistic", "detailed", "colorful", "vintage", "modern", "cubist", "impressionist", "abstract",
        "minimalist", "pixel", "mosaic", "sculpture", "statue", "figurine", "toy", "model", "miniature",
        // scenes and places
        "beach", "seashore", "sea", "ocean", "lake", "river", "water", "waterfall", "mountain", "mountains",
        "hill", "forest", "woods", "jungle", "desert", "snow", "ice", "glacier", "field", "meadow", "garden",
        "park", "city", "street", "road", "bridge", "building", "house", "room", "kitchen", "table", "desk",
        "floor", "wooden", "cobblestone", "grass", "sand", "rock", "rocks", "stone", "sky", "clouds", "cloud",
        "sun", "sunset", "sunrise", "moon", "night", "day", "rain", "storm", "fog", "leaves", "falling", "fall",
        "autumn", "winter", "summer", "spring", "flowers", "flower", "tree", "trees", "bed", "couch", "shelf",
        "window", "door", "wall", "milk", "space", "galaxy", "stars", "planet", "underwater", "coral", "reef",
        "space", "station", "market", "cafe", "library", "museum", "stage", "studio", "rooftop", "balcony",
        "tower", "eiffel", "paris", "tokyo", "york", "new", "grand", "canyon", "castle", "village", "farm",
        "barn", "harbor", "boat", "ship", "train", "car", "bus", "airport", "highway", "alley",
        // verbs and participles
        "floating", "sitting", "standing", "lying", "placed", "made", "shown", "covered", "surrounded", "wearing",
        "holding", "reflecting", "glowing", "shining", "burning", "melting", "swimming", "flying", "hanging",
        // objects and classes
        "object", "thing", "item", "dog", "cat", "bird", "fish", "horse", "bear", "teddy", "doll", "helmet",
        "headphone", "headphones", "pot", "penbag", "bag", "backpack", "handbag", "purse", "wallet", "cup",
        "mug", "bowl", "plate", "vase", "bottle", "glass", "jar", "teapot", "kettle", "lamp", "chair", "sofa",
        "clock", "watch", "shoe", "shoes", "sneaker", "boot", "hat", "cap", "glasses", "sunglasses", "scarf",
        "jacket", "shirt", "dress", "book", "pen", "pencilcase", "notebook", "phone", "laptop", "camera",
        "guitar", "piano", "ball", "robot", "car", "plush", "candle", "plant", "cactus", "succulent", "basket",
        "box", "can", "barrel", "bucket", "pillow", "blanket", "toaster", "speaker", "keyboard", "mouse",
        "monitor", "television", "radio", "bicycle", "motorcycle", "skateboard", "umbrella", "tent", "kite",
        "balloon", "trophy", "medal", "ring", "necklace", "bracelet", "earring", "crown", "mask", "sword",
        "shield", "key", "lock", "coin", "sculpture",
        // shapes
        "square", "circle", "triangle", "rectangle", "diamond", "star", "cross", "ring", "disk", "blob",
        "shape", "shapes", "dot", "line", "stripe", "stripes", "cube", "sphere", "cone", "cylinder", "pyramid",
        // colours and materials
        "red", "green", "blue", "yellow", "orange", "purple", "pink", "brown", "black", "white", "gray", "grey",
        "golden", "gold", "silver", "bronze", "metal", "metallic", "plastic", "wood", "ceramic", "glass",
        "paper", "fabric", "leather", "rubber", "shiny", "matte", "dark", "bright", "light", "pale", "vivid",
        // adjectives
        "small", "large", "big", "tiny", "huge", "old", "young", "cute", "beautiful", "pretty", "ugly",
        "happy", "sad", "funny", "strange", "magical", "fantasy", "sci", "fi", "futuristic", "ancient",
        "rusty", "clean", "dirty", "wet", "dry", "hot", "cold", "warm", "soft", "hard", "round", "flat",
        "tall", "short", "long", "wide", "narrow", "empty", "full", "broken", "new", "famous", "sunny",
        "cloudy", "rainy", "snowy", "misty", "starry", "purple", "neon", "pastel", "dramatic", "cinematic",
        "lighting", "light", "shadow", "shadows", "reflection", "bokeh", "depth", "focus", "sharp", "blurry",
        "high", "quality", "resolution", "professional", "amateur", "aerial", "macro", "wide", "angle",
        "lens", "film", "camera", "studio",
    };
    std::unordered_map<std::string, bool> seen;
    for (const auto& w : words) seen[w] = true;
    for (std::string_view w : kWords) {
      if (seen.emplace(std::string(w), true).second) words.emplace_back(w);
    }
    return Vocabulary(std::move(words));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
};

}  // namespace textloc
