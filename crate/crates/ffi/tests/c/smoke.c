#include <math.h>
#include <stdio.h>
#include "crossview.h"

int main(void) {
    XvCity *city = NULL;
    if (xv_city_generate(3, 8, 2, &city) != XV_STATUS_OK) return 1;
    XvEnv *env = NULL;
    if (xv_env_new(city, 7, &env) != XV_STATUS_OK) return 2;
    if (xv_env_reset(env, "heldout", INFINITY) != XV_STATUS_OK) return 3;
    XvStep step;
    double total = 0.0;
    int n = 0;
    while (xv_env_step(env, (unsigned)(n % 5), &step) == XV_STATUS_OK) {
        total += step.reward;
        n++;
    }
    if (n != 1000 || !step.episode_done) return 4;
    if (xv_env_reset(env, "nowhere", 100.0) != XV_STATUS_INVALID_ARGUMENT) return 5;
    if (xv_last_error() == NULL) return 6;
    printf("steps %d reward %.3f\n", n, total);
    xv_env_free(env);
    xv_city_free(city);
    return 0;
}
