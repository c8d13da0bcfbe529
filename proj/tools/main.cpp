#include <cstdio>

int main() {
  std::puts("ltxb: command-line surface not wired up yet");
  return 1;
}
