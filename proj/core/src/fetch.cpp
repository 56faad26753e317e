#include <filesystem>
#include <stdexcept>
#include <string>

#ifdef KDAUDIT_HAVE_OPENSSL
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include "kdaudit/error.hpp"
#include "kdaudit/util.hpp"

// Matches the declaration in harness.hpp; that header pulls in the model
// stack, which does not coexist with httplib in one translation unit.
namespace kdaudit {
void fetch_url(const std::string& url, const std::filesystem::path& dest);
}

namespace kdaudit {

void fetch_url(const std::string& url, const std::filesystem::path& dest) {
  std::string scheme, host, path;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw std::invalid_argument("fetch: malformed URL " + url);
  scheme = url.substr(0, scheme_end);
  const auto host_start = scheme_end + 3;
  const auto path_start = url.find('/', host_start);
  host = url.substr(host_start, path_start - host_start);
  path = path_start == std::string::npos ? "/" : url.substr(path_start);
  if (scheme != "http" && scheme != "https")
    throw std::invalid_argument("fetch: unsupported scheme " + scheme);
#ifndef KDAUDIT_HAVE_OPENSSL
  if (scheme == "https")
    throw IoError("fetch: built without TLS support, cannot download " + url);
#endif

  httplib::Result res;
  if (scheme == "http") {
    httplib::Client client(("http://" + host).c_str());
    client.set_follow_location(true);
    client.set_connection_timeout(30);
    client.set_read_timeout(120);
    res = client.Get(path.c_str());
  } else {
#ifdef KDAUDIT_HAVE_OPENSSL
    httplib::Client client(("https://" + host).c_str());
    client.set_follow_location(true);
    client.set_connection_timeout(30);
    client.set_read_timeout(120);
    res = client.Get(path.c_str());
#endif
  }
  if (!res) throw IoError("fetch: request to " + url + " failed");
  if (res->status != 200)
    throw IoError("fetch: " + url + " returned status " + std::to_string(res->status));
  write_text_file(dest, res->body);
}

}  // namespace kdaudit
