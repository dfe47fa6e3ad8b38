/* Links against libpsm_ffi and walks the handle lifecycle end to end.
 * Exits nonzero on the first broken contract. */

#include <psm.h>

#include <stdio.h>
#include <string.h>

int main(void) {
  if (psm_version() != PSM_API_VERSION) return 1;

  PsmConfig *cfg = psm_config_new();
  if (!cfg) return 2;

  if (psm_config_set(cfg, "task", "det") != PSM_STATUS_OK) return 3;
  if (psm_config_set(cfg, "bogus", "1") != PSM_STATUS_INVALID_ARGUMENT) return 4;

  const char *msg = psm_last_error();
  if (!msg || strstr(msg, "bogus") == NULL) return 5;

  char *dump = psm_config_to_string(cfg);
  if (!dump || strstr(dump, "task = det") == NULL) return 6;
  psm_string_free(dump);

  if (psm_run(NULL, "in", "out") != PSM_STATUS_NULL_ARGUMENT) return 7;
  if (psm_config_set(cfg, NULL, "1") != PSM_STATUS_NULL_ARGUMENT) return 8;

  psm_config_free(cfg);
  psm_config_free(NULL);
  psm_string_free(NULL);

  puts("smoke ok");
  return 0;
}
