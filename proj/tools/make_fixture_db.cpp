// Builds a SQLite database file from a SQL script.
#include <sqlite3.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

int main(int argc, char** argv) {
  if (argc != 3) {
    std::fprintf(stderr, "usage: %s <script.sql> <out.db>\n", argv[0]);
    return 2;
  }
  std::ifstream in(argv[1], std::ios::binary);
  if (!in) {
    std::fprintf(stderr, "cannot read %s\n", argv[1]);
    return 1;
  }
  std::stringstream script;
  script << in.rdbuf();

  const std::filesystem::path out = argv[2];
  const std::filesystem::path tmp = out.string() + ".tmp";
  std::filesystem::remove(tmp);
  sqlite3* db = nullptr;
  if (sqlite3_open(tmp.c_str(), &db) != SQLITE_OK) {
    std::fprintf(stderr, "cannot create %s: %s\n", tmp.c_str(), sqlite3_errmsg(db));
    sqlite3_close(db);
    return 1;
  }
  char* err = nullptr;
  if (sqlite3_exec(db, script.str().c_str(), nullptr, nullptr, &err) != SQLITE_OK) {
    std::fprintf(stderr, "%s: %s\n", argv[1], err ? err : "unknown error");
    sqlite3_free(err);
    sqlite3_close(db);
    return 1;
  }
  sqlite3_close(db);
  std::filesystem::rename(tmp, out);
  return 0;
}
