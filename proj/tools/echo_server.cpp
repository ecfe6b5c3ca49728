// Minimal TCP echo server used as a host-function process by the local
// backend. Usage: echo_server <port>
#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <thread>

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: %s <port>\n", argv[0]);
    return 2;
  }
  int port = std::atoi(argv[1]);
  if (port <= 0 || port > 65535) {
    std::fprintf(stderr, "bad port: %s\n", argv[1]);
    return 2;
  }

  int fd = socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) return 1;
  int one = 1;
  setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<unsigned short>(port));
  if (bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || listen(fd, 16) != 0) {
    std::perror("bind/listen");
    return 1;
  }

  for (;;) {
    int client = accept(fd, nullptr, nullptr);
    if (client < 0) continue;
    std::thread([client] {
      char buf[4096];
      ssize_t n;
      while ((n = read(client, buf, sizeof buf)) > 0) {
        ssize_t off = 0;
        while (off < n) {
          ssize_t w = write(client, buf + off, n - off);
          if (w <= 0) { close(client); return; }
          off += w;
        }
      }
      close(client);
    }).detach();
  }
}
