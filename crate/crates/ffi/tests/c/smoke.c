#include <stdio.h>
#include <stdlib.h>
#include "anneal_stein.h"

static const char *CONFIG =
    "seed = 1\n"
    "particles = 5\n"
    "[lattice]\nh = 1\nw = 1\nn = 3\n"
    "[ladder]\nsteps = 10\n"
    "[[experts]]\nname = \"a\"\n"
    "gmm = { components = [{ mean = 0.5, var = 1.0 }] }\n";

static unsigned levels = 0;

static void on_step(void *user, uint32_t segment, uint32_t t, double tau, double h, double d) {
    (void)segment; (void)t; (void)tau; (void)h; (void)d;
    *(unsigned *)user += 1;
}

int main(void) {
    AsConfig *cfg = NULL;
    if (as_config_parse(CONFIG, NULL, &cfg) != AS_STATUS_OK) {
        fprintf(stderr, "parse: %s\n", as_last_error());
        return 1;
    }
    if (as_config_set(cfg, "svgd.eta=-1") != AS_STATUS_USAGE || as_last_error() == NULL) {
        fprintf(stderr, "bad override accepted\n");
        return 1;
    }
    AsEnsemble *ens = NULL;
    if (as_sample(cfg, on_step, &levels, &ens) != AS_STATUS_OK) {
        fprintf(stderr, "sample: %s\n", as_last_error());
        return 1;
    }
    uint32_t dims[4];
    as_ensemble_dims(ens, dims);
    size_t len = dims[0] * dims[1] * dims[2] * dims[3];
    double *buf = malloc(len * sizeof(double));
    for (size_t i = 0; i < as_ensemble_len(ens); i++) {
        if (as_ensemble_copy(ens, i, buf, len) != AS_STATUS_OK) return 1;
        printf("%zu", i);
        for (size_t k = 0; k < len; k++) printf(" %.17g", buf[k]);
        printf("\n");
    }
    printf("levels %u version %s\n", levels, as_version());
    free(buf);
    as_ensemble_free(ens);
    as_config_free(cfg);
    return 0;
}
