#include "testing.hpp"

#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

using namespace bsm::testing;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(BSM_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST_CASE("cli exit codes") {
  const auto dir = scratch_dir("cli");
  write_synthetic_dataset(dir / "data", 2, 16);
  const std::string data = (dir / "data").string(), ckpt = (dir / "m.bsmk").string();
  const std::string tiny = " --set channels=4 --set state_dim=2 --set blocks=1 --set denet_width=4 --set crop_size=16";

  CHECK(run("") == 1);
  CHECK(run("frobnicate") == 1);
  CHECK(run("train --data " + data + " --out " + ckpt + " --set no_such_key=1") == 1);
  CHECK(run("train --data " + (dir / "missing").string() + " --out " + ckpt) == 2);
  CHECK(run("train --data " + data + " --out " + ckpt + tiny + " --iterations 2") == 0);
  CHECK(run("info --ckpt " + ckpt) == 0);
  CHECK(run("eval --ckpt " + ckpt + " --data " + data + " --csv " + (dir / "m.csv").string()) == 0);
  CHECK(std::filesystem::exists(dir / "m.csv"));
  CHECK(run("enhance --ckpt " + ckpt + " --in " + (dir / "data" / "low").string() + " --out " +
            (dir / "out").string() + " --dump-maps") == 0);
  CHECK(std::filesystem::exists(dir / "out" / "p1.enhanced.png"));
  CHECK(run("score --in " + (dir / "data" / "low" / "p0.png").string() + " --scorer histogram --out " +
            (dir / "s.pgm").string()) == 0);
  CHECK(run("validate-masks --in " + (dir / "data" / "low").string()) == 0);

  std::ofstream(dir / "junk.bsmk") << "not a checkpoint";
  CHECK(run("enhance --ckpt " + (dir / "junk.bsmk").string() + " --in " + data + " --out " + dir.string()) == 2);
  // The weighted loss overflows, which must surface as a numeric failure.
  CHECK(run("train --data " + data + " --out " + (dir / "x.bsmk").string() + tiny +
            " --set loss_weights=1e308,1e308,1e308 --iterations 3") == 3);
}
