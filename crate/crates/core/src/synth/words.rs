//! Built-in dictionary for label sampling.

#[rustfmt::skip]
pub const WORDS: &[&str] = &[
    "a", "i", "an", "at", "be", "by", "do", "go", "if", "in", "is", "it", "me", "my", "no", "of", "on",
    "or", "so", "to", "up", "us", "we", "all", "and", "any", "are", "bar", "bus", "can", "car", "cup",
    "day", "eat", "end", "far", "few", "for", "fun", "get", "got", "had", "has", "her", "him", "his",
    "hot", "how", "inn", "its", "job", "key", "let", "low", "man", "map", "new", "not", "now", "old",
    "one", "our", "out", "own", "pay", "put", "red", "run", "say", "see", "she", "sky", "sun", "tax",
    "tea", "ten", "the", "too", "top", "two", "use", "way", "who", "why", "yes", "you", "zoo", "area",
    "back", "bank", "bell", "best", "blue", "book", "cafe", "city", "club", "cold", "come", "dark",
    "door", "down", "east", "exit", "fast", "fire", "food", "free", "from", "full", "gate", "gift",
    "gold", "good", "hall", "hand", "help", "here", "high", "home", "hope", "hour", "idea", "inch",
    "jazz", "just", "keep", "kind", "king", "lake", "land", "last", "left", "life", "line", "live",
    "long", "look", "love", "made", "main", "make", "many", "mark", "more", "most", "move", "much",
    "name", "near", "next", "nice", "north", "open", "park", "past", "play", "pool", "post", "pull",
    "push", "quiz", "rain", "read", "rest", "road", "room", "rule", "safe", "sale", "shop", "show",
    "side", "sign", "slow", "snow", "star", "stop", "take", "taxi", "team", "text", "that", "this",
    "time", "town", "tree", "turn", "very", "view", "walk", "wall", "want", "west", "wide", "wind",
    "work", "year", "zone", "about", "after", "again", "apple", "beach", "black", "board", "bread",
    "brown", "chair", "clean", "clock", "coffee", "corner", "course", "danger", "dinner", "doctor",
    "double", "energy", "family", "garden", "golden", "ground", "health", "hotel", "house", "island",
    "light", "local", "lucky", "market", "metro", "money", "motor", "music", "night", "office",
    "orange", "people", "phone", "photo", "place", "plaza", "point", "power", "price", "quick",
    "radio", "river", "royal", "school", "second", "street", "studio", "summer", "table", "theatre",
    "ticket", "today", "travel", "united", "value", "video", "water", "white", "window", "winter",
    "world", "yellow", "airport", "balance", "company", "country", "digital", "express", "factory",
    "gallery", "history", "kitchen", "library", "machine", "morning", "natural", "parking",
    "pharmacy", "picture", "product", "quality", "science", "service", "station", "student",
    "support", "welcome", "business", "computer", "building", "chemical", "district", "festival",
    "hospital", "industry", "magazine", "mountain", "national", "platform", "practice", "question",
    "recovery", "security", "shopping", "standard", "universe", "vacation", "breakfast", "education",
    "emergency", "furniture", "apartment", "equipment", "direction", "knowledge", "important",
    "newspaper", "president", "restaurant", "university", "government", "department", "collection",
    "experience", "technology", "television", "background", "opposition", "production",
];
