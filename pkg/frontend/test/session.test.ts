import { describe, expect, it } from "vitest";

import { ApiClient, ApiError } from "../src/api.js";
import { RatingSession } from "../src/session.js";
import { makeFakeService } from "./fake-service.js";

function makeSession(service = makeFakeService()) {
  const api = new ApiClient("", service.campaignId, service.fetch);
  return { service, session: new RatingSession(api, "eval-1") };
}

function scoreEverything(session: RatingSession) {
  for (const key of session.pendingKeys) {
    session.setScore(key, "adequacy", 3);
    session.setScore(key, "fluency", 4);
  }
}

describe("RatingSession", () => {
  it("loads the first item with zero progress", async () => {
    const { session } = makeSession();
    await session.loadNext();
    expect(session.state).toBe("rating");
    expect(session.item?.item_id).toBe("item-0000");
    expect(session.progress).toEqual({ rated: 0, total: 3 });
  });

  it("blocks submission until every hypothesis has both scores", async () => {
    const { session } = makeSession();
    await session.loadNext();
    expect(session.complete).toBe(false);
    scoreEverything(session);
    session.setScore("E", "fluency", undefined as never); // knock one out
    const sel = session.selections.get("E")!;
    delete sel.fluency;
    expect(session.complete).toBe(false);
    session.setScore("E", "fluency", 2);
    expect(session.complete).toBe(true);
  });

  it("submits one rating per hypothesis and advances", async () => {
    const { service, session } = makeSession();
    await session.loadNext();
    scoreEverything(session);
    await session.submitAll();
    expect(service.submitCalls).toBe(5);
    expect(service.ratings.size).toBe(5);
    expect(session.item?.item_id).toBe("item-0001");
    expect(session.progress.rated).toBe(1);
  });

  it("walks through to the done screen", async () => {
    const { session } = makeSession();
    await session.loadNext();
    while (session.state === "rating") {
      scoreEverything(session);
      await session.submitAll();
    }
    expect(session.state).toBe("done");
    expect(session.progress).toEqual({ rated: 3, total: 3 });
  });

  it("retries idempotently when an acknowledgement is lost", async () => {
    const { service, session } = makeSession();
    service.dropAcksFor = 1; // first POST applies server-side but the ack dies
    await session.loadNext();
    scoreEverything(session);
    await session.submitAll();
    // client retried; server holds exactly one rating per hypothesis
    expect(service.ratings.size).toBe(5);
    expect(session.item?.item_id).toBe("item-0001");
    expect(service.submitCalls).toBe(6); // 5 + the one retry
  });

  it("keeps acknowledged hypotheses out of a failed submit's retry", async () => {
    const { service, session } = makeSession();
    await session.loadNext();
    scoreEverything(session);
    // two consecutive losses exceed nothing; force a permanent failure after 3 acks
    let calls = 0;
    const realFetch = service.fetch;
    const api = new ApiClient("", service.campaignId, async (url, init) => {
      if (init?.method === "POST") {
        calls++;
        if (calls > 3) {
          throw new TypeError("network gone");
        }
      }
      return realFetch(url, init);
    });
    const flaky = new RatingSession(api, "eval-2");
    await flaky.loadNext();
    for (const key of flaky.pendingKeys) {
      flaky.setScore(key, "adequacy", 2);
      flaky.setScore(key, "fluency", 2);
    }
    await flaky.submitAll();
    expect(flaky.state).toBe("rating");
    expect(flaky.lastError).toBeTruthy();
    expect(flaky.acknowledged.size).toBe(3);
    expect(flaky.pendingKeys.length).toBe(2); // only the stragglers remain
  });

  it("resumes mid-item after a refresh", async () => {
    const { service, session } = makeSession();
    await session.loadNext();
    // rate two hypotheses directly against the server (pre-refresh state)
    for (const key of ["A", "B"]) {
      await new ApiClient("", service.campaignId, service.fetch).submit({
        evaluator_id: "eval-1",
        item_id: "item-0000",
        blind_key: key,
        adequacy: 4,
        fluency: 4,
      });
    }
    const fresh = makeSession(service).session; // same service = same log
    await fresh.loadNext();
    expect(fresh.item?.item_id).toBe("item-0000");
    expect([...fresh.acknowledged].sort()).toEqual(["A", "B"]);
    expect(fresh.pendingKeys.sort()).toEqual(["C", "D", "E"]);
  });

  it("surfaces a 422 instead of retrying it", async () => {
    const { service } = makeSession();
    const api = new ApiClient("", service.campaignId, service.fetch);
    await expect(
      api.submit({
        evaluator_id: "eval-1",
        item_id: "item-0000",
        blind_key: "A",
        adequacy: 9,
        fluency: 1,
      }),
    ).rejects.toThrowError(ApiError);
    expect(service.submitCalls).toBe(1); // no retry on a 4xx
  });

  it("shows a retryable error when the network is down", async () => {
    const { service, session } = makeSession();
    service.failNextFor = 1;
    await session.loadNext();
    expect(session.state).toBe("error");
    await session.loadNext();
    expect(session.state).toBe("rating"); // nothing was lost
  });
});
