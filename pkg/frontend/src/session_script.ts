/**
 * Scripted annotation session for end-to-end checks: drives a live
 * annotation service through the same controller the browser UI uses.
 *
 * Usage: node dist/session_script.mjs <base-url>
 *
 * Labels every queued item with its model suggestion, except the first
 * item which is marked entirely "can't tell". Prints a JSON summary when
 * the service reports the run done.
 */

import { AnnotationApi } from "./api";
import { AnnotationSession, CANT_TELL } from "./state";

const base = process.argv[2];
if (!base) {
  console.error("usage: session_script <base-url>");
  process.exit(2);
}

const api = new AnnotationApi(base);
const session = new AnnotationSession(api);

const summary = {
  labeled: 0,
  maskedItem: null as number | null,
  advanceAccepted: false,
  iterationsSeen: new Set<number>(),
  series: [] as number[],
};

const deadline = Date.now() + 120_000;

async function sleep(ms: number) {
  return new Promise((resolve) => setTimeout(resolve, ms));
}

while (Date.now() < deadline) {
  await session.refresh();
  const status = session.progress.status;
  if (status) summary.iterationsSeen.add(status.iteration);

  for (const card of [...session.cards]) {
    card.item.schema.attributes.forEach((_, m) => {
      const value = summary.maskedItem === null ? CANT_TELL : card.item.suggested[m];
      session.select(card.item.id, m, value);
    });
    if (summary.maskedItem === null) summary.maskedItem = card.item.id;
    if (!session.canSubmit(card.item.id)) {
      console.error(`submit unexpectedly disabled for item ${card.item.id}`);
      process.exit(1);
    }
    await session.submit(card.item.id);
    summary.labeled += 1;
  }

  if (session.iterationComplete()) {
    summary.advanceAccepted = (await session.advance()) || summary.advanceAccepted;
  }
  if (status?.done) {
    summary.series = session.progress.accuracySeries;
    break;
  }
  await sleep(100);
}

console.log(JSON.stringify({
  labeled: summary.labeled,
  masked_item: summary.maskedItem,
  advance_accepted: summary.advanceAccepted,
  iterations_seen: [...summary.iterationsSeen].sort(),
  accuracy_series: summary.series,
}));
