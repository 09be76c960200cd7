#include <math.h>
#include <stdio.h>
#include <string.h>

#include "musedec.h"

#define CHECK(x)                                                              \
  do {                                                                        \
    MusedecStatus s_ = (x);                                                   \
    if (s_ != MUSEDEC_STATUS_OK) {                                            \
      fprintf(stderr, "%s failed (%d): %s\n", #x, (int)s_, musedec_last_error()); \
      return 1;                                                               \
    }                                                                         \
  } while (0)

int main(int argc, char **argv) {
  if (argc < 2) return 2;
  size_t shape[2] = {2, 3};
  double data[6] = {1, 0, 0, 0, 1, 0};
  MusedecTensor *t = NULL;
  CHECK(musedec_tensor_new(shape, 2, data, &t));
  CHECK(musedec_tensor_write(t, argv[1], 2));
  MusedecTensor *back = NULL;
  CHECK(musedec_tensor_read(argv[1], &back));
  double out[6];
  CHECK(musedec_tensor_data(back, out, 6));
  if (memcmp(out, data, sizeof data) != 0) return 3;

  MusedecTensor *rsm = NULL;
  CHECK(musedec_cosine_rsm(t, &rsm));
  double r[4];
  CHECK(musedec_tensor_data(rsm, r, 4));
  if (r[0] != 1.0 || r[1] != 0.0) return 4;

  double p[2] = {0.01, 0.04}, adj[2];
  uint8_t rej[2];
  CHECK(musedec_holm(p, 2, 0.05, adj, rej));
  if (fabs(adj[0] - 0.02) > 1e-15 || fabs(adj[1] - 0.04) > 1e-15) return 5;

  MusedecTensor *bad = NULL;
  if (musedec_tensor_read("/nonexistent/x.msed", &bad) != MUSEDEC_STATUS_IO) return 6;
  if (strlen(musedec_last_error()) == 0) return 7;

  musedec_tensor_free(t);
  musedec_tensor_free(back);
  musedec_tensor_free(rsm);
  printf("ok %s\n", musedec_version());
  return 0;
}
