import json, struct, hashlib
L,gh,gw,th,tw=2,4,5,12,16
d=[struct.unpack('<f',struct.pack('<f',1.0+0.25*i/3.0))[0] for i in range(L*gh*gw)]
db=b''.join(struct.pack('<f',x) for x in d)
def q(v): return int(round(min(max(v,0.0),1.0)*255.0))
tb=bytes(q(((l*7+y*3+x*5+c*11)%17)/16.0) for l in range(L) for y in range(th) for x in range(tw) for c in range(4))
m={"format":"lms","version":1,"layers":L,"grid":{"height":gh,"width":gw},"texture":{"height":th,"width":tw},
"intrinsics":{"fx":16.0,"fy":16.0,"cx":7.5,"cy":5.5,"width":16,"height":12},"diagonal":"main","depth_range":[min(d),max(d)],
"buffers":[{"name":"depths","uri":"depths.bin","dtype":"float32le","shape":[L,gh,gw],"byte_length":len(db),"sha256":hashlib.sha256(db).hexdigest()},
{"name":"textures","uri":"textures.bin","dtype":"uint8","shape":[L,th,tw,4],"byte_length":len(tb),"sha256":hashlib.sha256(tb).hexdigest()}]}
s=json.dumps(m,indent=2)+"\n"
print(hashlib.sha256(s.encode()).hexdigest())
