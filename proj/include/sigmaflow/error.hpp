/*
 * Copyright 2026 The sigmaflow Authors.
 * This file is licensed to you under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License. You may obtain a copy
 * of the License at http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software distributed under
 * the License is distributed on an "AS IS" BASIS, WITHOUT WARRANTIES OR REPRESENTATIONS
 * OF ANY KIND, either express or implied. See the License for the specific language
 * governing permissions and limitations under the License.
 */
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace sigmaflow {

/// Base class of every error raised by the library.
class Error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Input outside the mathematical domain of an operation (boundary point, non-finite value).
class DomainError : public Error
{
public:
    using Error::Error;
};

/// Singular factorization of a matrix that was required to be positive definite.
class LinalgError : public Error
{
public:
    using Error::Error;
};

/// Malformed or inconsistent input: shapes, invalid fields, bad files.
class ValidationError : public Error
{
public:
    using Error::Error;
};

/// A file that could not be parsed. Carries the byte offset of the failure.
class ParseError : public ValidationError
{
public:
    ParseError(const std::string& what, std::size_t offset)
        : ValidationError(what + " (at byte " + std::to_string(offset) + ")")
        , m_offset(offset)
    {}

    std::size_t offset() const { return m_offset; }

private:
    std::size_t m_offset;
};

/// Integration produced a non-finite state or the adaptive step underflowed.
class NumericalError : public Error
{
public:
    NumericalError(const std::string& what, double last_valid_time)
        : Error(what)
        , m_last_valid_time(last_valid_time)
    {}

    double last_valid_time() const { return m_last_valid_time; }

private:
    double m_last_valid_time;
};

/// Request exceeds a hard capability limit (e.g. dense eigendecomposition size).
class CapabilityError : public Error
{
public:
    using Error::Error;
};

} // namespace sigmaflow
