#include "oasis/http.hpp"

#include <httplib.h>

#include "oasis/common.hpp"

namespace oasis {

JsonHttpClient::JsonHttpClient(Endpoint endpoint) : endpoint_(std::move(endpoint)) {
  const auto scheme_end = endpoint_.url.find("://");
  if (scheme_end == std::string::npos)
    throw Error("config_error", "endpoint must be an absolute http(s) URL: " + endpoint_.url);
  const auto path_start = endpoint_.url.find('/', scheme_end + 3);
  base_ = endpoint_.url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : endpoint_.url.substr(path_start);
}

JsonHttpClient::~JsonHttpClient() = default;

Json JsonHttpClient::post(const Json& body) const {
  httplib::Client cli(base_);
  cli.set_connection_timeout(endpoint_.timeout_s, 0);
  cli.set_read_timeout(endpoint_.timeout_s, 0);
  httplib::Headers headers;
  if (!endpoint_.token.empty()) headers.emplace("Authorization", "Bearer " + endpoint_.token);

  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) {
    throw Error("http_error", endpoint_.url + ": " + httplib::to_string(res.error()));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error("http_error", endpoint_.url + ": status " + std::to_string(res->status));
  }
  try {
    return Json::parse(res->body);
  } catch (const Json::exception& e) {
    throw Error("http_error", endpoint_.url + ": invalid JSON response (" + e.what() + ")");
  }
}

}  // namespace oasis
