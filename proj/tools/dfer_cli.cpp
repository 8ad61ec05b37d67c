#include <cstdio>

int main() {
  std::puts("dfer: not wired yet");
  return 4;
}
