/* Copyright 2026 The pipemax-sim Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pipemax {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class NoKvHeadroom : public Error {
 public:
  using Error::Error;
};

class DegenerateSamples : public Error {
 public:
  using Error::Error;
};

class EmptySystem : public Error {
 public:
  using Error::Error;
};

// Raised when block accounting cannot honor a committed plan. Reaching this
// indicates a scheduler or accounting bug.
class OutOfMemory : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class SpecError : public Error {
 public:
  using Error::Error;
};

class EmptyWorkload : public Error {
 public:
  using Error::Error;
};

class PoolTooLarge : public Error {
 public:
  using Error::Error;
};

// Errors tied to a line of an input file (1-based).
class LineError : public Error {
 public:
  LineError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ParseError : public LineError {
 public:
  using LineError::LineError;
};

class ValueError : public LineError {
 public:
  using LineError::LineError;
};

}  // namespace pipemax
