import { describe, expect, it } from "vitest";

import { Api, assertBlindItem } from "../src/api.js";
import { SessionFlow } from "../src/state.js";
import { FixtureServer, RUBRIC } from "./fixture.js";

function makeFlow(server: FixtureServer): SessionFlow {
  return new SessionFlow(new Api(server.fetch as unknown as typeof fetch));
}

describe("session flow against the recorded fixture server", () => {
  it("grades a full 27-item session to completion", async () => {
    const server = new FixtureServer(); // 3 models x 3 classes x 3 images
    expect(server.items.length).toBe(27);
    const flow = makeFlow(server);
    await flow.start();
    expect(flow.snapshot().phase).toBe("rating");
    expect(flow.snapshot().rubric).toEqual(RUBRIC);

    let guard = 0;
    while (flow.snapshot().phase === "rating" && guard < 60) {
      flow.selectGrade((guard % 6) as number);
      await flow.submit();
      guard += 1;
    }
    expect(flow.snapshot().phase).toBe("complete");
    expect(flow.snapshot().gradedCount).toBe(27);
    expect(server.complete).toBe(true);
    expect(server.postCount).toBe(27); // exactly one POST per item
  });

  it("iterates items in server order", async () => {
    const server = new FixtureServer({ models: 1, imagesPerClass: 1 });
    const flow = makeFlow(server);
    await flow.start();
    const seen: string[] = [];
    while (flow.snapshot().phase === "rating") {
      seen.push(flow.currentItem()!.itemId);
      flow.selectGrade(4);
      await flow.submit();
    }
    expect(seen).toEqual(server.items.map((i) => i.itemId));
  });

  it("resumes at the first ungraded item after a refresh", async () => {
    const server = new FixtureServer();
    const first = makeFlow(server);
    await first.start();
    for (let i = 0; i < 10; i++) {
      first.selectGrade(3);
      await first.submit();
    }
    // refresh: a brand-new flow over the same server state
    const second = makeFlow(server);
    await second.start();
    const state = second.snapshot();
    expect(state.phase).toBe("rating");
    expect(state.gradedCount).toBe(10);
    expect(state.index).toBe(10);
    expect(second.currentItem()!.itemId).toBe(server.items[10].itemId);
  });

  it("rejects grades outside 0..5 before any request is made", async () => {
    const server = new FixtureServer({ models: 1, imagesPerClass: 1 });
    const flow = makeFlow(server);
    await flow.start();
    flow.selectGrade(7);
    flow.selectGrade(-1);
    flow.selectGrade(2.5);
    expect(flow.snapshot().selectedGrade).toBeNull();
    await flow.submit(); // nothing selected: no POST
    expect(server.postCount).toBe(0);
  });

  it("treats 409 as server truth and advances", async () => {
    const server = new FixtureServer({ models: 1, imagesPerClass: 1 });
    const flow = makeFlow(server);
    await flow.start();
    const item = flow.currentItem()!;
    // grade arrives out of band (another tab)
    await server.fetch(`/api/v1/sessions/001/items/${item.itemId}/grade`, {
      method: "POST",
      body: JSON.stringify({ grade: 2 }),
    });
    flow.selectGrade(5);
    await flow.submit();
    const state = flow.snapshot();
    expect(state.index).toBeGreaterThan(0);
    expect(state.notice).toContain("already recorded");
    expect(server.items.find((i) => i.itemId === item.itemId)!.grade).toBe(2);
  });

  it("parks the grade on network failure and resubmits only it", async () => {
    let failures = 1;
    const server = new FixtureServer({
      models: 1,
      imagesPerClass: 1,
      failNextPost: () => failures-- > 0,
    });
    const flow = makeFlow(server);
    await flow.start();
    flow.selectGrade(4);
    await flow.submit();
    let state = flow.snapshot();
    expect(state.retryPending).not.toBeNull();
    expect(state.retryPending!.grade).toBe(4);
    const postsBefore = server.postCount;
    await flow.submit(); // blocked while a retry is pending
    expect(server.postCount).toBe(postsBefore);
    await flow.retry();
    state = flow.snapshot();
    expect(state.retryPending).toBeNull();
    expect(server.postCount).toBe(postsBefore + 1);
    expect(server.items[0].grade).toBe(4);
  });

  it("shows the empty screen when no session is open", async () => {
    const server = new FixtureServer({ models: 1, imagesPerClass: 1 });
    for (const item of server.items) {
      item.grade = 1;
    }
    const flow = makeFlow(server);
    await flow.start();
    expect(flow.snapshot().phase).toBe("empty");
  });
});

describe("blind payload guard", () => {
  it("accepts the documented item schema", () => {
    const item = {
      itemId: "item-000",
      originalUrl: "/images/a.png",
      segmentationUrl: "/images/b.png",
      explanationUrl: "/images/c.png",
      classLabel: "Basal",
      graded: false,
    };
    expect(assertBlindItem(item)).toEqual(item);
  });

  it("rejects payloads that leak model identity", async () => {
    const server = new FixtureServer({ leakModelId: true });
    const flow = makeFlow(server);
    await flow.start();
    expect(flow.snapshot().phase).toBe("error");
    expect(flow.snapshot().notice).toContain("modelId");
  });

  it("fixture payloads carry no model identity", async () => {
    const server = new FixtureServer();
    const res = await server.fetch("/api/v1/sessions/001");
    const text = await res.text();
    expect(text).not.toContain("modelId");
    expect(text).not.toContain("trial-");
  });
});
