#pragma once

#include <string>

#include "httplib.h"

#include "counsel/service.hpp"

namespace counsel {

// Routes ChatService onto cpp-httplib. All bodies are JSON.
class HttpServer {
public:
    explicit HttpServer(ChatService& service) : service_(service) {
        const std::size_t threads = service.config().worker_threads;
        server_.new_task_queue = [threads] { return new httplib::ThreadPool(threads); };

        server_.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) {
            send(res, service_.health());
        });
        server_.Post("/api/sessions", [this](const httplib::Request&, httplib::Response& res) {
            send(res, service_.create_session());
        });
        server_.Get(R"(/api/sessions/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
            send(res, service_.get_session(req.matches[1]));
        });
        server_.Post(R"(/api/sessions/([^/]+)/messages)", [this](const httplib::Request& req, httplib::Response& res) {
            send(res, service_.post_message(req.matches[1], req.body));
        });
        server_.Post(R"(/api/sessions/([^/]+)/survey)", [this](const httplib::Request& req, httplib::Response& res) {
            send(res, service_.post_survey(req.matches[1], req.body));
        });
        // Browser preflight for a client served from another origin.
        server_.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
            res.status = 204;
        });
        server_.set_post_routing_handler([](const httplib::Request&, httplib::Response& res) {
            res.set_header("Access-Control-Allow-Origin", "*");
        });
        server_.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
            if (!res.body.empty()) return;
            if (res.status == 404) {
                send(res, api_error(404, "not_found", "no route for " + req.method + " " + req.path));
            } else {
                send(res, api_error(res.status, "http_error", "request failed with status " + std::to_string(res.status)));
            }
        });
        server_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
            std::string what = "unexpected error";
            try {
                std::rethrow_exception(ep);
            } catch (const std::exception& e) {
                what = e.what();
            } catch (...) {
            }
            log(LogLevel::error, "request failed: " + what);
            send(res, api_error(500, "internal_error", "internal error"));
        });
    }

    // Binds to `port` (0 picks a free one) and returns the bound port, or -1.
    int bind(const std::string& host, int port) {
        if (port == 0) return server_.bind_to_any_port(host);
        return server_.bind_to_port(host, port) ? port : -1;
    }

    // Blocks until stop().
    bool run() { return server_.listen_after_bind(); }

    void stop() { server_.stop(); }
    void wait_until_ready() const { server_.wait_until_ready(); }

private:
    static void send(httplib::Response& res, const ApiResponse& r) {
        res.status = r.status;
        res.set_content(r.body.dump(), "application/json");
    }

    ChatService& service_;
    httplib::Server server_;
};

}  // namespace counsel
