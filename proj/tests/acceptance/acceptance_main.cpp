// placeholder; filled in once the core suite is green
#include <cstdio>
int main() { std::printf("acceptance suite not yet wired\n"); return 1; }
