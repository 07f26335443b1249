#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "cwss.h"

int main(void) {
    CwssModel *model = NULL;
    if (cwss_model_init("tiny", 7, &model) != CWSS_STATUS_OK) {
        fprintf(stderr, "init: %s\n", cwss_last_error_message());
        return 1;
    }
    uint32_t s = cwss_model_input_size(model);
    size_t n = 3 * (size_t)s * s;
    float *image = malloc(n * sizeof(float));
    for (size_t i = 0; i < n; i++) image[i] = 1.0f;
    float scores[27];
    if (cwss_classify(model, image, n, scores, 27) != CWSS_STATUS_OK) return 2;
    uint8_t *mask = malloc((size_t)s * s);
    CwssSegmentOptions opts = cwss_segment_options_default();
    opts.samples = 2;
    if (cwss_segment(model, image, n, CWSS_MODE_MORPHOLOGICAL, &opts, mask, (size_t)s * s) != CWSS_STATUS_OK) return 3;
    if (cwss_classify(model, image, n - 1, scores, 27) != CWSS_STATUS_SHAPE) return 4;
    if (cwss_last_error_message() == NULL) return 5;
    printf("%s %s\n", cwss_version(), cwss_class_code(mask[0]));
    free(mask);
    free(image);
    cwss_model_free(model);
    return 0;
}
