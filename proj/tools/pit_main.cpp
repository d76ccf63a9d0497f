#include <cstdio>

int main() {
  std::puts("pit: subcommands not wired yet");
  return 1;
}
