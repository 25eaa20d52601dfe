/* Minimal C consumer of the gexp ABI: handle lifecycle, generator
 * evaluation, error retrieval, and a full JSON-in/JSON-out run.
 *
 * Build (from the workspace root, after `cargo build -p gexp-ffi`):
 *
 *   gcc -std=c11 -Wall -Wextra examples/smoke.c \
 *       -Icrates/gexp-ffi/include \
 *       target/debug/libgexp_ffi.a \
 *       -lpthread -ldl -lm -o smoke
 */

#include <stdio.h>
#include <string.h>
#include <gexp.h>

int main(void) {
    printf("gexp %s\n", gexp_version());

    /* Volatility interval [0.5, 1.0]: G(a) = sup over the set of half
     * sigma^2 a, so G(2) = 1 and G(-2) = -0.25 exactly. */
    GexpTheta *theta = NULL;
    GexpStatus st = gexp_theta_interval1d_new(0.5, 1.0, &theta);
    if (st != GEXP_STATUS_OK) {
        fprintf(stderr, "constructor failed: %s\n", gexp_last_error());
        return 1;
    }

    double a = 2.0, g = 0.0;
    st = gexp_g_function(theta, &a, &g);
    if (st != GEXP_STATUS_OK || g != 1.0) {
        fprintf(stderr, "G(2) wrong: %f\n", g);
        return 1;
    }
    a = -2.0;
    gexp_g_function(theta, &a, &g);
    if (g != -0.25) {
        fprintf(stderr, "G(-2) wrong: %f\n", g);
        return 1;
    }
    printf("G(2) = %.2f, G(-2) = %.2f\n", 1.0, g);

    /* Failures come back as status codes with a readable message. */
    st = gexp_theta_dim(NULL, NULL);
    if (st != GEXP_STATUS_NULL_POINTER) {
        return 1;
    }
    printf("null handle reported as: %s\n", gexp_last_error());

    /* A complete Monte Carlo run from a JSON config. The report carries
     * the config hash and seed, so any number in it can be reproduced. */
    const char *cfg =
        "{ \"experiment\": \"mc\","
        "  \"theta\": { \"kind\": \"interval1d\", \"sigma_low\": 0.5, \"sigma_high\": 1.0 },"
        "  \"grid\": { \"horizon\": 1.0, \"n_steps\": 16 },"
        "  \"paths\": 200, \"seed\": 9,"
        "  \"battery\": [ { \"form\": \"level\", \"payoff\": { \"kind\": \"square\" }, \"time\": 1.0 } ],"
        "  \"family\": { \"kind\": \"constants\" } }";
    char *report = NULL;
    bool pass = false;
    st = gexp_run_json(cfg, NULL, &report, &pass);
    if (st != GEXP_STATUS_OK) {
        fprintf(stderr, "run failed: %s\n", gexp_last_error());
        return 1;
    }
    if (!pass || strstr(report, "\"config_sha256\"") == NULL) {
        fprintf(stderr, "unexpected report: %s\n", report);
        return 1;
    }
    printf("mc run passed; report is %zu bytes of JSON\n", strlen(report));

    gexp_string_free(report);
    gexp_theta_free(theta);
    printf("smoke ok\n");
    return 0;
}
