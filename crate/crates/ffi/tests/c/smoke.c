#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>

#include "tagstream.h"

#define CHECK(cond)                                                            \
  do {                                                                         \
    if (!(cond)) {                                                             \
      fprintf(stderr, "%s:%d: %s (last error: %s)\n", __FILE__, __LINE__,     \
              #cond, tsrm_last_error());                                       \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  float samples[1024];
  for (int i = 0; i < 1024; i++)
    samples[i] = 0.5f * sinf(2.0f * 3.14159265f * 440.0f * (float)i / 48000.0f);

  /* Encode, then decode in two steps to exercise partial input. */
  TsrmFrame *frame = NULL;
  CHECK(tsrm_frame_new_audio(1000, 48000, 1, 1024, samples, &frame) == TSRM_STATUS_OK);
  size_t needed = 0;
  CHECK(tsrm_encode(frame, NULL, 0, &needed) == TSRM_STATUS_BUFFER_TOO_SMALL);
  CHECK(needed == 20 + 12 + 4 * 1024);
  unsigned char *buf = malloc(needed);
  size_t written = 0;
  CHECK(tsrm_encode(frame, buf, needed, &written) == TSRM_STATUS_OK && written == needed);
  CHECK(memcmp(buf, "TSRM", 4) == 0);

  TsrmFrame *back = NULL;
  size_t consumed = 0;
  CHECK(tsrm_decode(buf, 25, &back, &consumed) == TSRM_STATUS_NEED_MORE_DATA);
  CHECK(consumed == needed);
  CHECK(strlen(tsrm_last_error()) > 0);
  CHECK(tsrm_decode(buf, written, &back, &consumed) == TSRM_STATUS_OK && consumed == written);
  CHECK(tsrm_frame_kind(back) == TSRM_FRAME_KIND_AUDIO);
  CHECK(tsrm_frame_timestamp(back) == 1000);
  uint32_t rate = 0, channels = 0, spc = 0;
  const float *got = NULL;
  CHECK(tsrm_frame_audio(back, &rate, &channels, &spc, &got) == TSRM_STATUS_OK);
  CHECK(rate == 48000 && channels == 1 && spc == 1024);
  CHECK(memcmp(got, samples, sizeof samples) == 0);
  tsrm_frame_free(back);
  free(buf);

  /* 47 frames of 1024 make exactly one default-length window. */
  TsrmWindower *w = NULL;
  CHECK(tsrm_windower_new(48128, 0, &w) == TSRM_STATUS_OK);
  TsrmWindow *win = NULL;
  for (int k = 0; k < 47; k++) {
    CHECK(tsrm_windower_take(w, &win) == TSRM_STATUS_NOT_READY);
    CHECK(tsrm_windower_push(w, frame) == TSRM_STATUS_OK);
  }
  CHECK(tsrm_windower_take(w, &win) == TSRM_STATUS_OK);
  const float *ws = NULL;
  size_t wlen = 0;
  CHECK(tsrm_window_samples(win, &ws, &wlen, NULL, NULL) == TSRM_STATUS_OK && wlen == 48128);

  TsrmTagger *tagger = NULL;
  CHECK(tsrm_tagger_new("reference", 3, &tagger) == TSRM_STATUS_OK);
  CHECK(tsrm_tagger_new("bogus", 3, &tagger) == TSRM_STATUS_INVALID_ARGUMENT);
  TsrmTagResult *result = NULL;
  CHECK(tsrm_tagger_tag(tagger, samples, 1024, 48000, 0, &result) == TSRM_STATUS_OK);
  CHECK(strcmp(tsrm_tag_result_label(result, 0), "ToneMid") == 0);
  CHECK(tsrm_tag_result_score(result, 0) > 0.9);

  TsrmFrame *meta = NULL;
  CHECK(tsrm_tag_result_to_frame(result, "c-relay", &meta) == TSRM_STATUS_OK);
  CHECK(strstr(tsrm_frame_metadata_xml(meta), "audio_tags") != NULL);
  TsrmTagResult *parsed = NULL;
  CHECK(tsrm_tag_result_parse(meta, &parsed) == TSRM_STATUS_OK);
  CHECK(strcmp(tsrm_tag_result_source(parsed), "c-relay") == 0);
  CHECK(tsrm_tag_result_count(parsed) == tsrm_tag_result_count(result));

  /* Loopback stream. */
  TsrmSender *sender = NULL;
  CHECK(tsrm_sender_new("c-smoke", NULL, 0, 0, &sender) == TSRM_STATUS_OK);
  char addr[64];
  snprintf(addr, sizeof addr, "127.0.0.1:%u", (unsigned)tsrm_sender_port(sender));
  TsrmReceiver *rx = NULL;
  CHECK(tsrm_receiver_connect(addr, 1u << TSRM_FRAME_KIND_METADATA, &rx) == TSRM_STATUS_OK);
  CHECK(tsrm_sender_wait_for_subscribers(sender, 1, 2000) == TSRM_STATUS_OK);
  CHECK(tsrm_sender_send(sender, frame) == TSRM_STATUS_OK);
  CHECK(tsrm_sender_send(sender, meta) == TSRM_STATUS_OK);
  tsrm_sender_free(sender);
  TsrmFrame *recvd = NULL;
  CHECK(tsrm_receiver_recv(rx, 2000, &recvd) == TSRM_STATUS_OK);
  CHECK(tsrm_frame_kind(recvd) == TSRM_FRAME_KIND_METADATA);
  CHECK(strcmp(tsrm_frame_metadata_xml(recvd), tsrm_frame_metadata_xml(meta)) == 0);
  CHECK(tsrm_receiver_recv(rx, 2000, &recvd) == TSRM_STATUS_END_OF_STREAM);

  tsrm_receiver_free(rx);
  tsrm_frame_free(meta);
  tsrm_tag_result_free(parsed);
  tsrm_tag_result_free(result);
  tsrm_tagger_free(tagger);
  tsrm_window_free(win);
  tsrm_windower_free(w);
  tsrm_frame_free(frame);
  printf("ok %s\n", tsrm_version());
  return 0;
}
