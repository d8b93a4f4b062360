#include <math.h>
#include <stdio.h>
#include <string.h>

#include "diffcap.h"

#define EXPECT(cond)                                              \
  do {                                                            \
    if (!(cond)) {                                                \
      fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
      return 1;                                                   \
    }                                                             \
  } while (0)

int main(void) {
  DcSchedule *s = NULL, *r = NULL;
  EXPECT(dc_schedule_new("cosine", 1000, &s) == DC_STATUS_OK);
  EXPECT(dc_schedule_steps(s) == 1000);
  EXPECT(dc_schedule_respace(s, 100, &r) == DC_STATUS_OK);
  EXPECT(dc_schedule_steps(r) == 100);

  double a = 0, b = 0;
  EXPECT(dc_schedule_alpha_bar(s, 1000, &a) == DC_STATUS_OK);
  EXPECT(dc_schedule_alpha_bar(r, 100, &b) == DC_STATUS_OK);
  EXPECT(a == b);

  double cx = 0, c0 = 0, var = 0;
  EXPECT(dc_schedule_posterior(r, 0, &cx, &c0, &var) == DC_STATUS_OUT_OF_RANGE);
  EXPECT(dc_last_error_message() != NULL);

  DcSchedule *bad = NULL;
  EXPECT(dc_schedule_new("nope", 10, &bad) == DC_STATUS_INVALID_ARGUMENT);
  EXPECT(strstr(dc_last_error_message(), "nope") != NULL);

  const char *refs[] = {"a b"};
  double score = 0;
  EXPECT(dc_bleu("a a a", refs, 1, 1, &score) == DC_STATUS_OK);
  EXPECT(fabs(score - 1.0 / 3.0) < 1e-12);

  dc_schedule_free(r);
  dc_schedule_free(s);
  puts("ok");
  return 0;
}
