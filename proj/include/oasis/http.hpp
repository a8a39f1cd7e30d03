#pragma once

#include <memory>
#include <string>

#include "oasis/common.hpp"

namespace oasis {

/// Connection settings for one external service.
struct Endpoint {
  std::string url;    // http(s)://host[:port]/path
  std::string token;  // sent as "Authorization: Bearer <token>" when non-empty
  int timeout_s = 60;
};

/// Minimal JSON-over-HTTP POST client. One request per call; retries are the
/// caller's business. Throws Error("http_error", ...) on transport failure,
/// non-2xx status, or a non-JSON body.
class JsonHttpClient {
 public:
  explicit JsonHttpClient(Endpoint endpoint);
  ~JsonHttpClient();
  JsonHttpClient(const JsonHttpClient&) = delete;
  JsonHttpClient& operator=(const JsonHttpClient&) = delete;

  Json post(const Json& body) const;

  const Endpoint& endpoint() const noexcept { return endpoint_; }

 private:
  Endpoint endpoint_;
  std::string base_;
  std::string path_;
};

}  // namespace oasis
