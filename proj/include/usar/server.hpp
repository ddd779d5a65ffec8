#pragma once

// HTTP + websocket front end for live sessions, one thread per connection.
//
//   GET  /maps                 registered maps
//   GET  /models               registered models and their manifests
//   POST /session              {"map_id", "model_id"} -> {"session_id", ...}
//   GET  /ws/session/<id>      websocket upgrade; JSON messages both ways
//   GET  /<path>               static files from the configured web root

#include <boost/asio.hpp>
#include <boost/beast.hpp>
#include <boost/beast/websocket.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <list>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>

#include "usar/liveserve.hpp"

namespace usar {

namespace net = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace ws = beast::websocket;
using tcp = net::ip::tcp;

class Server {
 public:
  Server(SessionManager& sessions, std::optional<std::filesystem::path> web_root = std::nullopt)
      : sessions_(sessions), web_root_(std::move(web_root)) {}
  ~Server() { stop(); }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // Binds and starts accepting; returns the bound port (useful with port 0).
  unsigned short start(const std::string& host = "127.0.0.1", unsigned short port = 0) {
    acceptor_.emplace(ioc_);
    const tcp::endpoint ep(net::ip::make_address(host), port);
    acceptor_->open(ep.protocol());
    acceptor_->set_option(net::socket_base::reuse_address(true));
    acceptor_->bind(ep);
    acceptor_->listen();
    port_ = acceptor_->local_endpoint().port();
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    return port_;
  }

  unsigned short port() const { return port_; }

  void stop() {
    if (!running_.exchange(false)) return;
    beast::error_code ec;
    // A blocking accept() is not woken by closing its socket; connect once to release it.
    {
      tcp::endpoint ep = acceptor_->local_endpoint(ec);
      if (ep.address().is_unspecified()) ep.address(ep.protocol() == tcp::v4() ? net::ip::address(net::ip::address_v4::loopback())
                                                                            : net::ip::address(net::ip::address_v6::loopback()));
      tcp::socket wake(ioc_);
      wake.connect(ep, ec);
    }
    if (accept_thread_.joinable()) accept_thread_.join();
    acceptor_->close(ec);
    std::list<Conn> conns;
    {
      std::lock_guard lock(mu_);
      conns.swap(conns_);
    }
    for (Conn& c : conns) {
      c.socket->shutdown(tcp::socket::shutdown_both, ec);
    }
    for (Conn& c : conns)
      if (c.thread.joinable()) c.thread.join();
  }

  // Blocks until stop() is called from another thread.
  void wait() {
    if (accept_thread_.joinable()) accept_thread_.join();
  }

 private:
  struct Conn {
    std::shared_ptr<tcp::socket> socket;
    std::thread thread;
  };

  void accept_loop() {
    while (running_) {
      auto socket = std::make_shared<tcp::socket>(ioc_);
      beast::error_code ec;
      acceptor_->accept(*socket, ec);
      if (!running_) return;
      if (ec) continue;
      std::lock_guard lock(mu_);
      conns_.remove_if([](Conn& c) {
        if (c.socket->is_open()) return false;
        if (c.thread.joinable()) c.thread.join();
        return true;
      });
      conns_.push_back({socket, std::thread([this, socket] { serve(socket); })});
    }
  }

  static http::response<http::string_body> reply(const http::request<http::string_body>& req, http::status status,
                                                 std::string body, std::string type = "application/json") {
    http::response<http::string_body> res{status, req.version()};
    res.set(http::field::content_type, type);
    res.keep_alive(req.keep_alive());
    res.body() = std::move(body);
    res.prepare_payload();
    return res;
  }

  static http::response<http::string_body> reply_json(const http::request<http::string_body>& req,
                                                      http::status status, const json& body) {
    return reply(req, status, body.dump());
  }

  static std::string content_type(const std::filesystem::path& p) {
    const std::string ext = p.extension().string();
    if (ext == ".html") return "text/html";
    if (ext == ".js") return "application/javascript";
    if (ext == ".css") return "text/css";
    if (ext == ".json") return "application/json";
    if (ext == ".png") return "image/png";
    if (ext == ".svg") return "image/svg+xml";
    return "application/octet-stream";
  }

  http::response<http::string_body> route(const http::request<http::string_body>& req) {
    const std::string target(req.target());
    try {
      if (req.method() == http::verb::get && target == "/maps") return reply_json(req, http::status::ok, sessions_.list_maps());
      if (req.method() == http::verb::get && target == "/models")
        return reply_json(req, http::status::ok, sessions_.list_models());
      if (req.method() == http::verb::post && target == "/session") {
        const json body = json::parse(req.body());
        auto s = sessions_.open_session(body.at("map_id").get<std::string>(), body.at("model_id").get<std::string>());
        json out = {{"v", kWireVersion}, {"session_id", s->id()}, {"ws", "/ws/session/" + s->id()}};
        out["snapshot"] = s->snapshot();
        return reply_json(req, http::status::created, out);
      }
      if (req.method() == http::verb::get && web_root_) return serve_static(req, target);
    } catch (const json::exception& e) {
      return reply_json(req, http::status::bad_request, {{"v", kWireVersion}, {"error", e.what()}});
    } catch (const NotFound& e) {
      return reply_json(req, http::status::not_found, {{"v", kWireVersion}, {"error", e.what()}});
    } catch (const Error& e) {
      return reply_json(req, http::status::bad_request, {{"v", kWireVersion}, {"error", e.what()}});
    }
    return reply_json(req, http::status::not_found, {{"v", kWireVersion}, {"error", "no route for " + target}});
  }

  http::response<http::string_body> serve_static(const http::request<http::string_body>& req, std::string target) {
    namespace fs = std::filesystem;
    if (const auto q = target.find('?'); q != std::string::npos) target.resize(q);
    if (target == "/") target = "/index.html";
    if (target.find("..") != std::string::npos)
      return reply_json(req, http::status::bad_request, {{"v", kWireVersion}, {"error", "invalid path"}});
    const fs::path path = *web_root_ / target.substr(1);
    std::ifstream in(path, std::ios::binary);
    if (!in || fs::is_directory(path))
      return reply_json(req, http::status::not_found, {{"v", kWireVersion}, {"error", "not found: " + target}});
    std::ostringstream body;
    body << in.rdbuf();
    return reply(req, http::status::ok, body.str(), content_type(path));
  }

  void serve(std::shared_ptr<tcp::socket> socket) {
    beast::error_code ec;
    beast::flat_buffer buffer;
    try {
      for (;;) {
        http::request<http::string_body> req;
        http::read(*socket, buffer, req, ec);
        if (ec) break;
        const std::string target(req.target());
        static constexpr std::string_view kWsPrefix = "/ws/session/";
        if (ws::is_upgrade(req) && target.starts_with(kWsPrefix)) {
          run_websocket(*socket, std::move(req), target.substr(kWsPrefix.size()));
          break;
        }
        auto res = route(req);
        http::write(*socket, res, ec);
        if (ec || !res.keep_alive()) break;
      }
    } catch (const std::exception&) {
    }
    socket->shutdown(tcp::socket::shutdown_send, ec);
    socket->close(ec);
  }

  void run_websocket(tcp::socket& socket, http::request<http::string_body> req, const std::string& id) {
    auto session = sessions_.find(id);
    ws::stream<tcp::socket&> stream(socket);
    beast::error_code ec;
    if (!session) {
      auto res = reply_json(req, http::status::not_found, {{"v", kWireVersion}, {"error", "unknown session " + id}});
      http::write(stream.next_layer(), res, ec);
      return;
    }
    stream.accept(req, ec);
    if (ec) return;
    stream.text(true);
    auto send = [&](const json& msg) {
      stream.write(net::buffer(msg.dump()), ec);
      return !ec;
    };
    if (!send(session->snapshot())) return;
    for (;;) {
      beast::flat_buffer buf;
      stream.read(buf, ec);
      if (ec) break;
      json reply_msg;
      try {
        reply_msg = session->handle(json::parse(beast::buffers_to_string(buf.data())));
      } catch (const json::exception& e) {
        reply_msg = {{"v", kWireVersion}, {"type", "error"}, {"error", std::string("malformed message: ") + e.what()}};
      }
      const bool closing = reply_msg.value("type", "") == "closed";
      if (!send(reply_msg)) break;
      if (closing) {
        sessions_.close_session(id);
        stream.close(ws::close_code::normal, ec);
        return;
      }
    }
    sessions_.close_session(id);
  }

  SessionManager& sessions_;
  std::optional<std::filesystem::path> web_root_;
  net::io_context ioc_;
  std::optional<tcp::acceptor> acceptor_;
  std::thread accept_thread_;
  std::atomic<bool> running_{false};
  unsigned short port_ = 0;
  std::mutex mu_;
  std::list<Conn> conns_;
};

}  // namespace usar
