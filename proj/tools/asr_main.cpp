// CLI stub; subcommands land together with the pipeline modules.
#include <cstdio>

int main() {
  std::puts("asr: no subcommands wired up yet");
  return 1;
}
