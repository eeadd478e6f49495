#pragma once

#include <stdexcept>
#include <string>

namespace tbattr {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor or feature-map dimensions do not line up.
struct ShapeError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct MissingLevel : Error {
  explicit MissingLevel(int level)
      : Error("pyramid level " + std::to_string(level) + " is missing"), level(level) {}
  int level;
};

struct MissingFile : Error {
  explicit MissingFile(const std::string& path) : Error("no such file: " + path), path(path) {}
  std::string path;
};

struct MalformedRecord : Error {
  MalformedRecord(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};

struct EmptyManifest : Error {
  EmptyManifest() : Error("manifest contains no records") {}
};

struct InvalidSize : Error {
  using Error::Error;
};

struct DegenerateBox : Error {
  using Error::Error;
};

struct EmptyBatch : Error {
  EmptyBatch() : Error("batch contains no records") {}
};

struct OutOfRange : Error {
  using Error::Error;
};

struct EmptyList : Error {
  EmptyList() : Error("cannot aggregate an empty list") {}
};

struct MissingBaseline : Error {
  MissingBaseline() : Error("ablation results have no baseline row") {}
};

struct MalformedLog : Error {
  using Error::Error;
};

}  // namespace tbattr
